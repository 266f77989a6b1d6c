//! Octave-band energy accumulation and free-field-normalized loudness.
//!
//! Band energies are built from the DFT bins of the whole simulated series,
//! computed one sample at a time with a Goertzel recurrence per bin, so a
//! full pressure history never has to be stored. A bin belongs to the band
//! whose half-open interval `[lo, hi)` contains its angular frequency.

use std::f64::consts::{PI, TAU};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{GridSpec, OccupancyGrid};
use crate::solver::{self, MediumParams, SimConfig, SimStats};

/// Lower edge of the first octave band, Hz.
pub const BASE_BAND_HZ: f64 = 125.0;
/// Default dB clamp applied to loudness values.
pub const DEFAULT_CLAMP_DB: (f32, f32) = (-40.0, 20.0);

/// Strictly increasing band edges in rad/s.
#[derive(Debug, Clone, PartialEq)]
pub struct BandSet {
    edges: Vec<f64>,
}

impl BandSet {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::Config("a band set needs at least two edges".into()));
        }
        if edges.iter().any(|e| !e.is_finite() || *e < 0.0) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("band edges must be finite, nonnegative and increasing: {edges:?}")));
        }
        Ok(Self { edges })
    }

    /// `count` octave bands starting at 125 Hz: edges 2pi * 125 * 2^i.
    pub fn octaves(count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("at least one octave band is required".into()));
        }
        Self::new((0..=count).map(|i| TAU * BASE_BAND_HZ * f64::powi(2.0, i as i32)).collect())
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    /// Edges in Hz, rounded to the micro-hertz so text forms stay readable.
    pub fn edges_hz(&self) -> Vec<f64> {
        self.edges.iter().map(|w| (w / TAU * 1e6).round() / 1e6).collect()
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn top(&self) -> f64 {
        *self.edges.last().expect("at least two edges")
    }

    pub fn band_width(&self, band: usize) -> f64 {
        self.edges[band + 1] - self.edges[band]
    }

    fn band_of(&self, omega: f64) -> Option<usize> {
        (0..self.len()).find(|&b| omega >= self.edges[b] && omega < self.edges[b + 1])
    }
}

#[derive(Debug, Clone, Copy)]
struct Bin {
    band: usize,
    coeff: f64,
    /// 2 for bins strictly between DC and Nyquist (conjugate image folded in).
    weight: f64,
}

/// DFT bins of an `n_samples`-long series at spacing `dt` that fall in the
/// bands, together with the scale turning |Goertzel|^2 into band energy.
#[derive(Debug, Clone)]
pub struct BinPlan {
    bins: Vec<Bin>,
    band_count: usize,
    /// dt^2 * d_omega / band_width, per band.
    band_scale: Vec<f64>,
}

impl BinPlan {
    pub fn new(bands: &BandSet, n_samples: usize, dt: f64) -> Result<Self> {
        if n_samples == 0 || !(dt > 0.0) {
            return Err(Error::Config("band analysis needs a positive length and time step".into()));
        }
        let nyquist = PI / dt;
        if bands.top() > nyquist * (1.0 + 1e-12) {
            return Err(Error::Config(format!(
                "top band edge {:.1} Hz lies above the Nyquist frequency {:.1} Hz",
                bands.top() / TAU,
                nyquist / TAU
            )));
        }
        let d_omega = TAU / (n_samples as f64 * dt);
        let mut bins = Vec::new();
        for k in 0..=n_samples / 2 {
            let omega = k as f64 * d_omega;
            if let Some(band) = bands.band_of(omega) {
                let weight = if k == 0 || 2 * k == n_samples { 1.0 } else { 2.0 };
                let theta = TAU * k as f64 / n_samples as f64;
                bins.push(Bin { band, coeff: 2.0 * theta.cos(), weight });
            }
        }
        let band_scale = (0..bands.len()).map(|b| dt * dt * d_omega / bands.band_width(b)).collect();
        Ok(Self { bins, band_count: bands.len(), band_scale })
    }

    pub fn bin_count(&self) -> usize {
        self.bins.len()
    }

    pub fn band_count(&self) -> usize {
        self.band_count
    }

    /// Scale from a band's weighted bin sum to its normalized energy.
    pub fn band_scale(&self, band: usize) -> f64 {
        self.band_scale[band]
    }
}

/// Goertzel accumulators for many channels sharing one bin plan.
///
/// State is laid out bin-major so each pushed frame is a contiguous sweep
/// per bin. The two delay slots alternate roles on even/odd samples.
#[derive(Debug, Clone)]
pub struct BandEnergyBank {
    plan: BinPlan,
    channels: usize,
    slot_a: Vec<f64>,
    slot_b: Vec<f64>,
    pushed: usize,
}

impl BandEnergyBank {
    pub fn new(plan: BinPlan, channels: usize) -> Self {
        let len = plan.bins.len() * channels;
        Self { plan, channels, slot_a: vec![0.0; len], slot_b: vec![0.0; len], pushed: 0 }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn samples_pushed(&self) -> usize {
        self.pushed
    }

    /// One sample per channel.
    pub fn push(&mut self, frame: &[f64]) {
        assert_eq!(frame.len(), self.channels, "frame width must equal channel count");
        let n = self.channels;
        // newest lands in `cur`, which holds s[n-2] on entry
        let (cur, prev) = if self.pushed % 2 == 0 {
            (&mut self.slot_a, &self.slot_b)
        } else {
            (&mut self.slot_b, &self.slot_a)
        };
        for (b, bin) in self.plan.bins.iter().enumerate() {
            let c = bin.coeff;
            let cur = &mut cur[b * n..(b + 1) * n];
            let prev = &prev[b * n..(b + 1) * n];
            for ((s, &p), &x) in cur.iter_mut().zip(prev).zip(frame) {
                *s = x + c * p - *s;
            }
        }
        self.pushed += 1;
    }

    /// Band-major energies: `out[band * channels + channel]`.
    pub fn energies(&self) -> Vec<f64> {
        let n = self.channels;
        let (last, before) = if self.pushed % 2 == 1 {
            (&self.slot_a, &self.slot_b)
        } else {
            (&self.slot_b, &self.slot_a)
        };
        let mut out = vec![0.0; self.plan.band_count * n];
        for (b, bin) in self.plan.bins.iter().enumerate() {
            let dst = &mut out[bin.band * n..(bin.band + 1) * n];
            let s1 = &last[b * n..(b + 1) * n];
            let s2 = &before[b * n..(b + 1) * n];
            for ((e, &a), &p) in dst.iter_mut().zip(s1).zip(s2) {
                let mag2 = (a * a + p * p - bin.coeff * a * p).max(0.0);
                *e += bin.weight * mag2;
            }
        }
        for band in 0..self.plan.band_count {
            let scale = self.plan.band_scale[band];
            out[band * n..(band + 1) * n].iter_mut().for_each(|e| *e *= scale);
        }
        out
    }
}

/// Band energies of one series:
/// `E_i = (1/(w_{i+1}-w_i)) * sum_{k in band i} w_k |dt X_k|^2 d_omega`
/// where `w_k` folds the negative-frequency image of each positive bin.
pub fn accumulate_band_energy(series: &[f64], bands: &BandSet, sample_rate: f64) -> Result<Vec<f64>> {
    let plan = BinPlan::new(bands, series.len(), 1.0 / sample_rate)?;
    let mut bank = BandEnergyBank::new(plan, 1);
    for &x in series {
        bank.push(&[x]);
    }
    Ok(bank.energies())
}

/// Band energies summed without the per-band width normalization; these add
/// up to `2 pi * dt * sum x^2` when the bands cover every bin.
pub fn unnormalized_band_energy(series: &[f64], bands: &BandSet, sample_rate: f64) -> Result<Vec<f64>> {
    let normalized = accumulate_band_energy(series, bands, sample_rate)?;
    Ok(normalized.iter().enumerate().map(|(b, e)| e * bands.band_width(b)).collect())
}

/// Per-band, per-pixel band energies on a slice grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BandEnergyField {
    pub spec: GridSpec,
    pub bands: BandSet,
    /// `energies[band * cells + row * resolution + col]`
    pub energies: Vec<f64>,
}

impl BandEnergyField {
    pub fn new(spec: GridSpec, bands: BandSet, energies: Vec<f64>) -> Result<Self> {
        if energies.len() != spec.cell_count() * bands.len() {
            return Err(Error::Encoder(format!(
                "expected {} energies, got {}",
                spec.cell_count() * bands.len(),
                energies.len()
            )));
        }
        if energies.iter().any(|e| !e.is_finite() || *e < 0.0) {
            return Err(Error::Encoder("band energies must be finite and nonnegative".into()));
        }
        Ok(Self { spec, bands, energies })
    }

    pub fn band(&self, band: usize) -> &[f64] {
        let n = self.spec.cell_count();
        &self.energies[band * n..(band + 1) * n]
    }

    pub fn at(&self, band: usize, col: usize, row: usize) -> f64 {
        self.band(band)[row * self.spec.resolution + col]
    }
}

/// Loudness in dB relative to free field, band-major planes.
#[derive(Debug, Clone, PartialEq)]
pub struct LoudnessField {
    pub spec: GridSpec,
    pub bands: BandSet,
    /// `values[band * cells + row * resolution + col]`
    pub values: Vec<f32>,
    pub object_mask: OccupancyGrid,
    pub clamp_db: (f32, f32),
}

impl LoudnessField {
    pub fn band_count(&self) -> usize {
        self.bands.len()
    }

    pub fn band(&self, band: usize) -> &[f32] {
        let n = self.spec.cell_count();
        &self.values[band * n..(band + 1) * n]
    }

    pub fn at(&self, band: usize, col: usize, row: usize) -> f32 {
        self.band(band)[row * self.spec.resolution + col]
    }

    /// Interleaved `[pixel][band]` copy, the container layout.
    pub fn to_channels_last(&self) -> Vec<f32> {
        let n = self.spec.cell_count();
        let nb = self.band_count();
        let mut out = vec![0.0; n * nb];
        for b in 0..nb {
            for p in 0..n {
                out[p * nb + b] = self.values[b * n + p];
            }
        }
        out
    }

    pub fn from_channels_last(
        spec: GridSpec,
        bands: BandSet,
        interleaved: &[f32],
        object_mask: OccupancyGrid,
        clamp_db: (f32, f32),
    ) -> Result<Self> {
        let n = spec.cell_count();
        let nb = bands.len();
        if interleaved.len() != n * nb {
            return Err(Error::Encoder(format!("expected {} values, got {}", n * nb, interleaved.len())));
        }
        let mut values = vec![0.0; n * nb];
        for p in 0..n {
            for b in 0..nb {
                values[b * n + p] = interleaved[p * nb + b];
            }
        }
        Ok(Self { spec, bands, values, object_mask, clamp_db })
    }

    /// Field of one constant value, used as a baseline predictor.
    pub fn constant(spec: GridSpec, bands: BandSet, value: f32, object_mask: OccupancyGrid) -> Self {
        let values = vec![value; spec.cell_count() * bands.len()];
        Self { spec, bands, values, object_mask, clamp_db: DEFAULT_CLAMP_DB }
    }
}

pub fn clamp_db(value: f64, (lo, hi): (f32, f32)) -> f32 {
    if value.is_nan() {
        return lo;
    }
    value.clamp(lo as f64, hi as f64) as f32
}

/// `10 log10(scene / free_field)` per pixel and band, clamped.
pub fn loudness_from_energies(
    scene: &BandEnergyField,
    free_field: &BandEnergyField,
    object_mask: OccupancyGrid,
    clamp: (f32, f32),
) -> Result<LoudnessField> {
    if scene.spec != free_field.spec || scene.bands != free_field.bands {
        return Err(Error::Encoder("scene and free-field grids or bands differ".into()));
    }
    if object_mask.spec() != scene.spec {
        return Err(Error::Encoder("object mask grid differs from the energy grid".into()));
    }
    if let Some(i) = free_field.energies.iter().position(|&e| !(e > 0.0)) {
        let n = scene.spec.cell_count();
        return Err(Error::Encoder(format!(
            "free-field energy is zero in band {} at pixel {}",
            i / n,
            i % n
        )));
    }
    let values = scene
        .energies
        .iter()
        .zip(&free_field.energies)
        .map(|(&s, &f)| {
            if s > 0.0 {
                clamp_db(10.0 * (s / f).log10(), clamp)
            } else {
                clamp.0
            }
        })
        .collect();
    Ok(LoudnessField { spec: scene.spec, bands: scene.bands.clone(), values, object_mask, clamp_db: clamp })
}

/// Result of running the scattering functional on one occupancy image.
#[derive(Debug, Clone)]
pub struct EncodedEntry {
    pub loudness: LoudnessField,
    pub stats: SimStats,
}

/// Simulate, normalize by the (cached) free field, attach the mask.
pub fn encode_entry(
    occupancy: &OccupancyGrid,
    medium: &MediumParams,
    config: &SimConfig,
    bands: &BandSet,
    free_field: &BandEnergyField,
) -> Result<EncodedEntry> {
    let run = solver::run_simulation(occupancy, medium, config, bands)?;
    let loudness = loudness_from_energies(&run.field, free_field, occupancy.clone(), DEFAULT_CLAMP_DB)?;
    Ok(EncodedEntry { loudness, stats: run.stats })
}

/// `encode_entry` with the free field looked up (or computed) in `cache_dir`.
pub fn encode_entry_cached(
    occupancy: &OccupancyGrid,
    medium: &MediumParams,
    config: &SimConfig,
    bands: &BandSet,
    cache_dir: Option<&Path>,
) -> Result<EncodedEntry> {
    let free = solver::free_field_reference(medium, config, bands, cache_dir)?;
    encode_entry(occupancy, medium, config, bands, &free)
}
