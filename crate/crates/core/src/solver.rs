//! 2D staggered-grid FDTD for the acoustic wave equation.
//!
//! Pressure lives at cell centers, x-velocity on vertical faces and
//! y-velocity on horizontal faces (density normalized to 1). The simulated
//! region is surrounded by a split-field perfectly matched layer. Occupied
//! cells hold zero pressure; faces between air and object carry a locally
//! reacting normal velocity `beta * p / c` with `beta = (1 - r) / (1 + r)`,
//! so a normally incident wave reflects with pressure coefficient `r`.
//!
//! The simulation grid refines the extraction slice by an odd factor, so
//! every slice pixel center coincides with a simulation cell center and the
//! object is the slice occupancy image blown up to the finer grid.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use crate::encoder::{BandEnergyBank, BandEnergyField, BandSet, BinPlan};
use crate::error::{Error, Result};
use crate::geometry::{GridSpec, OccupancyGrid, Point};
use crate::kv::KvMap;

/// Minimum grid points per wavelength at the top analysed frequency.
pub const MIN_POINTS_PER_WAVELENGTH: f64 = 4.0;
/// Largest stable Courant number of the 2D leapfrog scheme.
pub const CFL_LIMIT: f64 = std::f64::consts::FRAC_1_SQRT_2;
/// Slice energy left at the end of a run, relative to its peak.
pub const TRAILING_ENERGY_LIMIT: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MediumParams {
    /// Speed of sound, m/s.
    pub c: f64,
    /// Pressure reflection coefficient of object surfaces.
    pub reflectivity: f64,
}

impl Default for MediumParams {
    fn default() -> Self {
        Self { c: 343.0, reflectivity: 0.95 }
    }
}

impl MediumParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c.is_finite() && self.c > 0.0) {
            return Err(Error::Config(format!("speed of sound must be positive, got {}", self.c)));
        }
        if !(0.0..=1.0).contains(&self.reflectivity) {
            return Err(Error::Config(format!("reflectivity must lie in [0, 1], got {}", self.reflectivity)));
        }
        Ok(())
    }

    /// Normalized wall admittance realizing the reflectivity.
    pub fn wall_admittance(&self) -> f64 {
        (1.0 - self.reflectivity) / (1.0 + self.reflectivity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Extraction slice, centered on the origin.
    pub slice: GridSpec,
    /// Simulation cells per slice pixel along each axis (odd).
    pub oversample: usize,
    /// Half sizes of the simulated region (PML excluded), meters.
    pub region_half_x: f64,
    pub region_half_y: f64,
    pub source_position: Point,
    /// Top of the analysed bandwidth, Hz.
    pub max_frequency: f64,
    pub time_step: f64,
    pub duration: f64,
    pub pml_width: usize,
    pub pml_max_sigma: f64,
}

impl SimConfig {
    /// 64 x 64 slice over 16 m, 26 m x 16 m region, source at (-6, 0),
    /// analysed up to 500 Hz.
    pub fn desk(medium: &MediumParams) -> Self {
        Self::with_slice(GridSpec::desk(), 500.0, medium)
    }

    /// 256 x 256 slice, analysed up to 2 kHz.
    pub fn full_scale(medium: &MediumParams) -> Self {
        Self::with_slice(GridSpec { resolution: 256, extent: 16.0 }, 2000.0, medium)
    }

    /// Region, source and PML fixed; the smallest odd oversample factor that
    /// resolves `max_frequency`; time step at Courant number 0.6 and the
    /// default duration.
    pub fn with_slice(slice: GridSpec, max_frequency: f64, medium: &MediumParams) -> Self {
        let mut cfg = Self {
            slice,
            oversample: auto_oversample(slice, max_frequency, medium),
            region_half_x: 13.0,
            region_half_y: 8.0,
            source_position: Point::new(-6.0, 0.0),
            max_frequency,
            time_step: 0.0,
            duration: 0.0,
            pml_width: 8,
            pml_max_sigma: 0.0,
        };
        cfg.derive_timing(medium, 0.6);
        cfg
    }

    /// Sets time step from a Courant number, the PML strength from the
    /// polynomial-grading optimum, and the duration to twice the longest
    /// source -> slice corner -> opposite corner path plus the pulse length.
    pub fn derive_timing(&mut self, medium: &MediumParams, courant: f64) {
        let h = self.spacing();
        self.time_step = courant * h / medium.c;
        self.pml_max_sigma = optimal_pml_sigma(medium.c, h, self.pml_width);
        let half = 0.5 * self.slice.extent;
        let s = self.source_position;
        let to_corner = [(-half, -half), (half, -half), (half, half), (-half, half)]
            .iter()
            .map(|&(x, y)| (x - s.x).hypot(y - s.y))
            .fold(0.0, f64::max);
        let diagonal = std::f64::consts::SQRT_2 * self.slice.extent;
        self.duration = 2.0 * (to_corner + diagonal) / medium.c + pulse_length(self.max_frequency);
    }

    /// Simulation cell size, meters.
    pub fn spacing(&self) -> f64 {
        self.slice.spacing() / self.oversample as f64
    }

    pub fn step_count(&self) -> usize {
        (self.duration / self.time_step).ceil() as usize
    }

    pub fn sample_rate(&self) -> f64 {
        1.0 / self.time_step
    }

    pub fn validate(&self, medium: &MediumParams, bands: &BandSet) -> Result<()> {
        medium.validate()?;
        if self.oversample == 0 || self.oversample % 2 == 0 {
            return Err(Error::Config(format!("oversample must be odd, got {}", self.oversample)));
        }
        if self.source_position.x >= 0.0 || self.source_position.y != 0.0 {
            return Err(Error::Config("the source must sit on the negative x-axis".into()));
        }
        let h = self.spacing();
        let half = 0.5 * self.slice.extent;
        if self.region_half_x < half || self.region_half_y < half {
            return Err(Error::Config("the simulated region must contain the slice".into()));
        }
        for (name, v) in [("x", self.region_half_x - half), ("y", self.region_half_y - half)] {
            let cells = v / h;
            if (cells - cells.round()).abs() > 1e-6 {
                return Err(Error::Config(format!("slice is not cell-aligned along {name}")));
            }
        }
        if self.source_position.x.abs() >= self.region_half_x {
            return Err(Error::Config("source lies outside the simulated region".into()));
        }
        let courant = medium.c * self.time_step / h;
        if !(courant > 0.0 && courant <= CFL_LIMIT) {
            return Err(Error::Config(format!("Courant number {courant:.4} violates 0 < C <= 1/sqrt(2)")));
        }
        let max_spacing = medium.c / (2.0 * self.max_frequency * MIN_POINTS_PER_WAVELENGTH);
        if h > max_spacing * (1.0 + 1e-9) {
            return Err(Error::Config(format!(
                "grid spacing {h:.4} m too coarse for {} Hz (needs <= {max_spacing:.4} m)",
                self.max_frequency
            )));
        }
        if bands.top() > TAU * self.max_frequency * (1.0 + 1e-12) {
            return Err(Error::Config("top band edge exceeds the configured bandwidth".into()));
        }
        if self.sample_rate() < 4.0 * bands.top() / TAU {
            return Err(Error::Config("sample rate below twice-oversampled Nyquist of the top band".into()));
        }
        if self.pml_width == 0 || !(self.pml_max_sigma >= 0.0) {
            return Err(Error::Config("PML needs a positive width and nonnegative strength".into()));
        }
        if !(self.duration > 0.0) {
            return Err(Error::Config("duration must be positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("resolution", self.slice.resolution);
        kv.insert("extent", format!("{:?}", self.slice.extent));
        kv.insert("oversample", self.oversample);
        kv.insert("region_half_x", format!("{:?}", self.region_half_x));
        kv.insert("region_half_y", format!("{:?}", self.region_half_y));
        kv.insert("source_x", format!("{:?}", self.source_position.x));
        kv.insert("source_y", format!("{:?}", self.source_position.y));
        kv.insert("max_frequency", format!("{:?}", self.max_frequency));
        kv.insert("time_step", format!("{:?}", self.time_step));
        kv.insert("duration", format!("{:?}", self.duration));
        kv.insert("pml_width", self.pml_width);
        kv.insert("pml_max_sigma", format!("{:?}", self.pml_max_sigma));
        kv
    }

    /// Overrides fields present in `kv`; timing is re-derived unless the
    /// file pins `time_step`/`duration` explicitly.
    pub fn apply_kv(&mut self, kv: &KvMap, medium: &MediumParams) -> Result<()> {
        let mut geometry_changed = false;
        if let Some(r) = kv.get_parsed::<usize>("resolution")? {
            self.slice = GridSpec::new(r, self.slice.extent)?;
            geometry_changed = true;
        }
        if let Some(e) = kv.get_parsed::<f64>("extent")? {
            self.slice = GridSpec::new(self.slice.resolution, e)?;
            geometry_changed = true;
        }
        macro_rules! field {
            ($key:literal, $ty:ty, $target:expr) => {
                if let Some(v) = kv.get_parsed::<$ty>($key)? {
                    $target = v;
                    geometry_changed = true;
                }
            };
        }
        field!("oversample", usize, self.oversample);
        field!("region_half_x", f64, self.region_half_x);
        field!("region_half_y", f64, self.region_half_y);
        field!("source_x", f64, self.source_position.x);
        field!("source_y", f64, self.source_position.y);
        field!("max_frequency", f64, self.max_frequency);
        field!("pml_width", usize, self.pml_width);
        if geometry_changed && kv.get("oversample").is_none() {
            self.oversample = auto_oversample(self.slice, self.max_frequency, medium);
        }
        if geometry_changed {
            let courant = kv.get_parsed::<f64>("courant")?.unwrap_or(0.6);
            self.derive_timing(medium, courant);
        }
        if let Some(v) = kv.get_parsed::<f64>("time_step")? {
            self.time_step = v;
        }
        if let Some(v) = kv.get_parsed::<f64>("duration")? {
            self.duration = v;
        }
        if let Some(v) = kv.get_parsed::<f64>("pml_max_sigma")? {
            self.pml_max_sigma = v;
        }
        Ok(())
    }
}

fn auto_oversample(slice: GridSpec, max_frequency: f64, medium: &MediumParams) -> usize {
    let max_spacing = medium.c / (2.0 * max_frequency * MIN_POINTS_PER_WAVELENGTH);
    let mut oversample = 1;
    while slice.spacing() / oversample as f64 > max_spacing * (1.0 + 1e-9) {
        oversample += 2;
    }
    oversample
}

/// Cubic-graded PML strength for a theoretical normal-incidence reflection
/// of 1e-4.
pub fn optimal_pml_sigma(c: f64, spacing: f64, width: usize) -> f64 {
    let order = 3.0;
    let reflection: f64 = 1e-4;
    -(order + 1.0) * c * reflection.ln() / (2.0 * width as f64 * spacing)
}

fn pulse_sigma_t(max_frequency: f64) -> f64 {
    // spectral peak of the Gaussian derivative at a third of the bandwidth
    let peak = max_frequency / 3.0;
    1.0 / (TAU * peak)
}

fn pulse_length(max_frequency: f64) -> f64 {
    10.0 * pulse_sigma_t(max_frequency)
}

/// Injected pressure per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSignal {
    pub samples: Vec<f64>,
    pub bandwidth: f64,
}

/// Unit-peak first derivative of a Gaussian whose spectrum peaks at a third
/// of the bandwidth. It has no DC component, so no net mass is injected.
pub fn make_source(config: &SimConfig) -> Result<SourceSignal> {
    let dt = config.time_step;
    if !(dt > 0.0) {
        return Err(Error::Config("time step must be positive".into()));
    }
    if config.max_frequency * 4.0 > 1.0 / dt {
        return Err(Error::Config(format!(
            "bandwidth {} Hz unachievable at sample rate {:.1} Hz",
            config.max_frequency,
            1.0 / dt
        )));
    }
    let sigma = pulse_sigma_t(config.max_frequency);
    // centered on a sample so the pulse is exactly antisymmetric
    let half = (5.0 * sigma / dt).ceil() as usize;
    let mut samples: Vec<f64> = (0..=2 * half)
        .map(|n| {
            let u = (n as f64 - half as f64) * dt / sigma;
            -u * (-0.5 * u * u).exp()
        })
        .collect();
    let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    samples.iter_mut().for_each(|s| *s /= peak);
    Ok(SourceSignal { samples, bandwidth: config.max_frequency })
}

impl SourceSignal {
    pub fn sample(&self, step: usize) -> f64 {
        self.samples.get(step).copied().unwrap_or(0.0)
    }

    pub fn duration(&self, dt: f64) -> f64 {
        self.samples.len() as f64 * dt
    }
}

/// Field state. Pressure is stored split into the parts driven by x and y
/// velocity divergence so each can carry its own PML damping; the physical
/// pressure is their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveState {
    pub nx: usize,
    pub ny: usize,
    pub pressure_x: Vec<f64>,
    pub pressure_y: Vec<f64>,
    /// `(nx + 1) x ny`, face `i` sits between cells `i - 1` and `i`.
    pub velocity_x: Vec<f64>,
    /// `nx x (ny + 1)`
    pub velocity_y: Vec<f64>,
    pub step_index: usize,
}

impl WaveState {
    pub fn zeros(nx: usize, ny: usize) -> Self {
        Self {
            nx,
            ny,
            pressure_x: vec![0.0; nx * ny],
            pressure_y: vec![0.0; nx * ny],
            velocity_x: vec![0.0; (nx + 1) * ny],
            velocity_y: vec![0.0; nx * (ny + 1)],
            step_index: 0,
        }
    }

    pub fn pressure(&self, i: usize, j: usize) -> f64 {
        let k = j * self.nx + i;
        self.pressure_x[k] + self.pressure_y[k]
    }

    pub fn is_finite(&self) -> bool {
        self.pressure_x
            .iter()
            .chain(&self.pressure_y)
            .chain(&self.velocity_x)
            .chain(&self.velocity_y)
            .all(|v| v.is_finite())
    }

    fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        let zip = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
        Self {
            nx: self.nx,
            ny: self.ny,
            pressure_x: zip(&self.pressure_x, &other.pressure_x),
            pressure_y: zip(&self.pressure_y, &other.pressure_y),
            velocity_x: zip(&self.velocity_x, &other.velocity_x),
            velocity_y: zip(&self.velocity_y, &other.velocity_y),
            step_index: self.step_index,
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn max_abs(&self) -> f64 {
        self.pressure_x
            .iter()
            .chain(&self.pressure_y)
            .chain(&self.velocity_x)
            .chain(&self.velocity_y)
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Simulation grid geometry derived from a config.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimGrid {
    pub nx: usize,
    pub ny: usize,
    pub spacing: f64,
    pub pml: usize,
    /// World coordinate of the lower-left corner of the non-PML region.
    pub x0: f64,
    pub y0: f64,
}

impl SimGrid {
    pub fn from_config(config: &SimConfig) -> Self {
        let h = config.spacing();
        let inner_x = (2.0 * config.region_half_x / h).round() as usize;
        let inner_y = (2.0 * config.region_half_y / h).round() as usize;
        let pml = config.pml_width;
        Self {
            nx: inner_x + 2 * pml,
            ny: inner_y + 2 * pml,
            spacing: h,
            pml,
            x0: -config.region_half_x,
            y0: -config.region_half_y,
        }
    }

    pub fn cell_center(&self, i: usize, j: usize) -> Point {
        Point::new(
            self.x0 + (i as f64 - self.pml as f64 + 0.5) * self.spacing,
            self.y0 + (j as f64 - self.pml as f64 + 0.5) * self.spacing,
        )
    }

    /// Cells and bilinear weights spreading a point quantity over the four
    /// nearest cell centers.
    pub fn bilinear(&self, p: Point) -> [(usize, usize, f64); 4] {
        let fx = (p.x - self.x0) / self.spacing + self.pml as f64 - 0.5;
        let fy = (p.y - self.y0) / self.spacing + self.pml as f64 - 0.5;
        let (i0, j0) = (fx.floor(), fy.floor());
        let (tx, ty) = (fx - i0, fy - j0);
        let (i0, j0) = (i0 as usize, j0 as usize);
        [
            (i0, j0, (1.0 - tx) * (1.0 - ty)),
            (i0 + 1, j0, tx * (1.0 - ty)),
            (i0, j0 + 1, (1.0 - tx) * ty),
            (i0 + 1, j0 + 1, tx * ty),
        ]
    }

    /// PML damping at a position measured in cells from the low edge.
    fn sigma_at(&self, pos: f64, n: usize, max_sigma: f64) -> f64 {
        let w = self.pml as f64;
        let lo = w;
        let hi = n as f64 - w;
        let depth = if pos < lo {
            lo - pos
        } else if pos > hi {
            pos - hi
        } else {
            return 0.0;
        };
        max_sigma * (depth / w).powi(3)
    }
}

/// A wall face: index into the velocity array, the air cell feeding it,
/// and the outward sign (+1 when the wall lies on the positive side).
#[derive(Debug, Clone, Copy)]
struct WallFace {
    face: usize,
    air: usize,
    sign: f64,
}

/// Precomputed update coefficients for one scene.
#[derive(Debug, Clone)]
pub struct Solver {
    pub grid: SimGrid,
    config: SimConfig,
    medium: MediumParams,
    solid: Vec<bool>,
    solid_cells: Vec<usize>,
    blocked_x: Vec<usize>,
    blocked_y: Vec<usize>,
    walls_x: Vec<WallFace>,
    walls_y: Vec<WallFace>,
    // per-column/row coefficients
    vx_decay: Vec<f64>,
    vx_gain: Vec<f64>,
    vy_decay: Vec<f64>,
    vy_gain: Vec<f64>,
    px_decay: Vec<f64>,
    px_gain: Vec<f64>,
    py_decay: Vec<f64>,
    py_gain: Vec<f64>,
    source_cells: [(usize, usize, f64); 4],
    slice_cells: Vec<usize>,
    slice_solid: Vec<bool>,
}

impl Solver {
    /// `occupancy` is on the slice grid of `config`.
    pub fn new(occupancy: &OccupancyGrid, medium: &MediumParams, config: &SimConfig) -> Result<Self> {
        if occupancy.spec() != config.slice {
            return Err(Error::Config("occupancy grid differs from the configured slice".into()));
        }
        let grid = SimGrid::from_config(config);
        let (nx, ny) = (grid.nx, grid.ny);
        let ov = config.oversample;
        let off_x = grid.pml + ((config.region_half_x - 0.5 * config.slice.extent) / grid.spacing).round() as usize;
        let off_y = grid.pml + ((config.region_half_y - 0.5 * config.slice.extent) / grid.spacing).round() as usize;

        let mut solid = vec![false; nx * ny];
        let res = config.slice.resolution;
        for row in 0..res {
            for col in 0..res {
                if occupancy.get(col, row) {
                    for dj in 0..ov {
                        for di in 0..ov {
                            solid[(off_y + row * ov + dj) * nx + off_x + col * ov + di] = true;
                        }
                    }
                }
            }
        }
        let slice_cells: Vec<usize> = (0..res)
            .flat_map(|row| (0..res).map(move |col| (row, col)))
            .map(|(row, col)| (off_y + row * ov + ov / 2) * nx + off_x + col * ov + ov / 2)
            .collect();
        let slice_solid = slice_cells.iter().map(|&k| solid[k]).collect();

        let in_pml = |i: usize, j: usize| i < grid.pml || j < grid.pml || i >= nx - grid.pml || j >= ny - grid.pml;
        let mut solid_cells = Vec::new();
        for j in 0..ny {
            for i in 0..nx {
                if solid[j * nx + i] {
                    if in_pml(i, j) {
                        return Err(Error::Geometry("object reaches into the absorbing layer".into()));
                    }
                    solid_cells.push(j * nx + i);
                }
            }
        }

        let mut blocked_x = Vec::new();
        let mut walls_x = Vec::new();
        for j in 0..ny {
            for f in 1..nx {
                let (a, b) = (j * nx + f - 1, j * nx + f);
                let face = j * (nx + 1) + f;
                match (solid[a], solid[b]) {
                    (true, true) => blocked_x.push(face),
                    (false, true) => walls_x.push(WallFace { face, air: a, sign: 1.0 }),
                    (true, false) => walls_x.push(WallFace { face, air: b, sign: -1.0 }),
                    (false, false) => {}
                }
            }
        }
        let mut blocked_y = Vec::new();
        let mut walls_y = Vec::new();
        for f in 1..ny {
            for i in 0..nx {
                let (a, b) = ((f - 1) * nx + i, f * nx + i);
                let face = f * nx + i;
                match (solid[a], solid[b]) {
                    (true, true) => blocked_y.push(face),
                    (false, true) => walls_y.push(WallFace { face, air: a, sign: 1.0 }),
                    (true, false) => walls_y.push(WallFace { face, air: b, sign: -1.0 }),
                    (false, false) => {}
                }
            }
        }

        let dt = config.time_step;
        let h = grid.spacing;
        let c2 = medium.c * medium.c;
        let sig = config.pml_max_sigma;
        let coeffs = |sigma: f64, gain: f64| {
            let d = 0.5 * sigma * dt;
            ((1.0 - d) / (1.0 + d), gain / (1.0 + d))
        };
        let (vx_decay, vx_gain): (Vec<f64>, Vec<f64>) =
            (0..=nx).map(|f| coeffs(grid.sigma_at(f as f64, nx, sig), dt / h)).unzip();
        let (vy_decay, vy_gain): (Vec<f64>, Vec<f64>) =
            (0..=ny).map(|f| coeffs(grid.sigma_at(f as f64, ny, sig), dt / h)).unzip();
        let (px_decay, px_gain): (Vec<f64>, Vec<f64>) =
            (0..nx).map(|i| coeffs(grid.sigma_at(i as f64 + 0.5, nx, sig), c2 * dt / h)).unzip();
        let (py_decay, py_gain): (Vec<f64>, Vec<f64>) =
            (0..ny).map(|j| coeffs(grid.sigma_at(j as f64 + 0.5, ny, sig), c2 * dt / h)).unzip();

        let source_cells = grid.bilinear(config.source_position);
        for &(i, j, w) in &source_cells {
            if w != 0.0 && solid[j * nx + i] {
                return Err(Error::Geometry("source lies inside the object".into()));
            }
        }

        Ok(Self {
            grid,
            config: config.clone(),
            medium: *medium,
            solid,
            solid_cells,
            blocked_x,
            blocked_y,
            walls_x,
            walls_y,
            vx_decay,
            vx_gain,
            vy_decay,
            vy_gain,
            px_decay,
            px_gain,
            py_decay,
            py_gain,
            source_cells,
            slice_cells,
            slice_solid,
        })
    }

    pub fn zero_state(&self) -> WaveState {
        WaveState::zeros(self.grid.nx, self.grid.ny)
    }

    pub fn is_solid(&self, i: usize, j: usize) -> bool {
        self.solid[j * self.grid.nx + i]
    }

    /// One leapfrog update followed by adding `source_sample` at the source.
    pub fn step(&self, state: &mut WaveState, source_sample: f64) {
        self.step_fields(state);
        self.inject(state, self.config.source_position, source_sample);
        state.step_index += 1;
    }

    /// Field update without any source.
    pub fn step_fields(&self, state: &mut WaveState) {
        let (nx, ny) = (self.grid.nx, self.grid.ny);
        let WaveState { pressure_x: px, pressure_y: py, velocity_x: vx, velocity_y: vy, .. } = state;

        // velocities from the pressure gradient
        for j in 0..ny {
            let row = &mut vx[j * (nx + 1)..(j + 1) * (nx + 1)];
            let pxr = &px[j * nx..(j + 1) * nx];
            let pyr = &py[j * nx..(j + 1) * nx];
            for f in 1..nx {
                let grad = (pxr[f] + pyr[f]) - (pxr[f - 1] + pyr[f - 1]);
                row[f] = self.vx_decay[f] * row[f] - self.vx_gain[f] * grad;
            }
        }
        for f in 1..ny {
            let (decay, gain) = (self.vy_decay[f], self.vy_gain[f]);
            let row = &mut vy[f * nx..(f + 1) * nx];
            let (lo_x, hi_x) = (&px[(f - 1) * nx..f * nx], &px[f * nx..(f + 1) * nx]);
            let (lo_y, hi_y) = (&py[(f - 1) * nx..f * nx], &py[f * nx..(f + 1) * nx]);
            for i in 0..nx {
                let grad = (hi_x[i] + hi_y[i]) - (lo_x[i] + lo_y[i]);
                row[i] = decay * row[i] - gain * grad;
            }
        }
        let admittance = self.medium.wall_admittance() / self.medium.c;
        for &f in &self.blocked_x {
            vx[f] = 0.0;
        }
        for &f in &self.blocked_y {
            vy[f] = 0.0;
        }
        for w in &self.walls_x {
            vx[w.face] = w.sign * admittance * (px[w.air] + py[w.air]);
        }
        for w in &self.walls_y {
            vy[w.face] = w.sign * admittance * (px[w.air] + py[w.air]);
        }

        // pressure from the velocity divergence
        for j in 0..ny {
            let (decay_y, gain_y) = (self.py_decay[j], self.py_gain[j]);
            let vxr = &vx[j * (nx + 1)..(j + 1) * (nx + 1)];
            let (vy_lo, vy_hi) = (&vy[j * nx..(j + 1) * nx], &vy[(j + 1) * nx..(j + 2) * nx]);
            let pxr = &mut px[j * nx..(j + 1) * nx];
            let pyr = &mut py[j * nx..(j + 1) * nx];
            for i in 0..nx {
                pxr[i] = self.px_decay[i] * pxr[i] - self.px_gain[i] * (vxr[i + 1] - vxr[i]);
                pyr[i] = decay_y * pyr[i] - gain_y * (vy_hi[i] - vy_lo[i]);
            }
        }
        for &k in &self.solid_cells {
            px[k] = 0.0;
            py[k] = 0.0;
        }
    }

    /// Adds `amount` of pressure at a point, spread bilinearly.
    pub fn inject(&self, state: &mut WaveState, at: Point, amount: f64) {
        if amount == 0.0 {
            return;
        }
        let cells = if at == self.config.source_position { self.source_cells } else { self.grid.bilinear(at) };
        for (i, j, w) in cells {
            let k = j * self.grid.nx + i;
            if w != 0.0 && !self.solid[k] {
                state.pressure_x[k] += 0.5 * w * amount;
                state.pressure_y[k] += 0.5 * w * amount;
            }
        }
    }

    /// Pressure at a point, bilinearly interpolated.
    pub fn probe(&self, state: &WaveState, at: Point) -> f64 {
        self.grid.bilinear(at).iter().map(|&(i, j, w)| w * state.pressure(i, j)).sum()
    }

    /// Slice-pixel pressures in row-major slice order.
    pub fn sample_slice(&self, state: &WaveState, out: &mut [f64]) {
        for (o, &k) in out.iter_mut().zip(&self.slice_cells) {
            *o = state.pressure_x[k] + state.pressure_y[k];
        }
    }

    pub fn slice_solid(&self) -> &[bool] {
        &self.slice_solid
    }
}

/// One update of `state` for the given scene, returning the new state.
pub fn step(
    state: &WaveState,
    occupancy: &OccupancyGrid,
    medium: &MediumParams,
    config: &SimConfig,
    source: &SourceSignal,
) -> Result<WaveState> {
    if state.step_index >= config.step_count() {
        return Err(Error::Config("step index past the configured duration".into()));
    }
    let solver = Solver::new(occupancy, medium, config)?;
    let mut next = state.clone();
    solver.step(&mut next, source.sample(state.step_index));
    if !next.is_finite() {
        return Err(Error::Instability { step: state.step_index });
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimStats {
    pub steps: usize,
    /// Final slice energy over its peak.
    pub trailing_energy_ratio: f64,
    pub max_abs_pressure: f64,
    pub wall_time: Duration,
}

impl SimStats {
    pub fn duration_sufficient(&self) -> bool {
        self.trailing_energy_ratio < TRAILING_ENERGY_LIMIT
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub field: BandEnergyField,
    pub stats: SimStats,
}

/// Runs every step, streaming slice pressures into band accumulators.
pub fn run_simulation(
    occupancy: &OccupancyGrid,
    medium: &MediumParams,
    config: &SimConfig,
    bands: &BandSet,
) -> Result<SimOutput> {
    config.validate(medium, bands)?;
    let start = Instant::now();
    let solver = Solver::new(occupancy, medium, config)?;
    let source = make_source(config)?;
    let steps = config.step_count();
    let plan = BinPlan::new(bands, steps, config.time_step)?;
    let pixels = config.slice.cell_count();
    let mut bank = BandEnergyBank::new(plan, pixels);
    let mut state = solver.zero_state();
    let mut frame = vec![0.0; pixels];
    let mut peak_energy = 0.0f64;
    let mut last_energy = 0.0;
    let mut max_abs = 0.0f64;
    for n in 0..steps {
        solver.step(&mut state, source.sample(n));
        solver.sample_slice(&state, &mut frame);
        let mut energy = 0.0;
        for &p in &frame {
            energy += p * p;
            max_abs = max_abs.max(p.abs());
        }
        if !energy.is_finite() || (n % 256 == 255 && !state.is_finite()) {
            return Err(Error::Instability { step: n });
        }
        peak_energy = peak_energy.max(energy);
        last_energy = energy;
        bank.push(&frame);
    }
    if !state.is_finite() {
        return Err(Error::Instability { step: steps });
    }
    let stats = SimStats {
        steps,
        trailing_energy_ratio: if peak_energy > 0.0 { last_energy / peak_energy } else { 0.0 },
        max_abs_pressure: max_abs,
        wall_time: start.elapsed(),
    };
    if !stats.duration_sufficient() {
        log::warn!(
            "trailing slice energy ratio {:.3e} exceeds {:.0e}; duration may be too short",
            stats.trailing_energy_ratio,
            TRAILING_ENERGY_LIMIT
        );
    }
    let field = BandEnergyField::new(config.slice, bands.clone(), bank.energies())?;
    Ok(SimOutput { field, stats })
}

const FREE_FIELD_MAGIC: &[u8; 8] = b"SCFFREF1";

/// Content hash of everything that determines a simulation result.
pub fn config_hash(medium: &MediumParams, config: &SimConfig, bands: &BandSet) -> String {
    let mut kv = config.to_kv();
    kv.insert("c", format!("{:?}", medium.c));
    kv.insert("reflectivity", format!("{:?}", medium.reflectivity));
    kv.insert("wall_admittance", format!("{:?}", medium.wall_admittance()));
    kv.insert("bands", format!("{:?}", bands.edges()));
    kv.insert("boundary", "local-admittance-v1");
    kv.insert("solver", "fdtd-staggered-split-pml-v1");
    hex::encode(Sha256::digest(kv.to_text().as_bytes()))
}

fn cache_path(dir: &Path, hash: &str) -> PathBuf {
    dir.join(format!("free_field_{hash}.bin"))
}

fn read_cached(path: &Path, expected_len: usize) -> Option<Vec<f64>> {
    let bytes = fs::read(path).ok()?;
    let header = 8 + 8 + 32;
    if bytes.len() != header + 8 * expected_len || &bytes[..8] != FREE_FIELD_MAGIC {
        return None;
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().ok()?) as usize;
    let payload = &bytes[header..];
    if len != expected_len || Sha256::digest(payload).as_slice() != &bytes[16..48] {
        return None;
    }
    Some(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn write_cached(path: &Path, values: &[f64]) -> Result<()> {
    let payload: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    let mut bytes = Vec::with_capacity(48 + payload.len());
    bytes.extend_from_slice(FREE_FIELD_MAGIC);
    bytes.extend_from_slice(&(values.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&Sha256::digest(&payload));
    bytes.extend_from_slice(&payload);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Band energies with no object, cached under `cache_dir` by config hash.
/// Unreadable or corrupt cache files are recomputed and overwritten.
pub fn free_field_reference(
    medium: &MediumParams,
    config: &SimConfig,
    bands: &BandSet,
    cache_dir: Option<&Path>,
) -> Result<BandEnergyField> {
    let expected = config.slice.cell_count() * bands.len();
    let path = cache_dir.map(|d| cache_path(d, &config_hash(medium, config, bands)));
    if let Some(path) = &path {
        if let Some(values) = read_cached(path, expected) {
            return BandEnergyField::new(config.slice, bands.clone(), values);
        }
    }
    let empty = OccupancyGrid::empty(config.slice);
    let field = run_simulation(&empty, medium, config, bands)?.field;
    if let Some(path) = &path {
        write_cached(path, &field.energies)?;
    }
    Ok(field)
}
