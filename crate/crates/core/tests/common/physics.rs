//! Measurements of solver behavior shared by the physics tests and the
//! acceptance suite. Each returns the measured quantity; callers own the
//! thresholds.

use scatter_core::encoder::{loudness_from_energies, BandEnergyField, BandSet, LoudnessField, DEFAULT_CLAMP_DB};
use scatter_core::geometry::{OccupancyGrid, Point};
use scatter_core::solver::{make_source, run_simulation, MediumParams, SimConfig, Solver};

/// Pulse injected at `from`, pressure recorded at `to` for `steps` steps.
pub fn point_response(medium: &MediumParams, cfg: &SimConfig, from: Point, to: Point, steps: usize) -> Vec<f64> {
    let solver = Solver::new(&OccupancyGrid::empty(cfg.slice), medium, cfg).unwrap();
    let src = make_source(cfg).unwrap();
    let mut state = solver.zero_state();
    let mut out = Vec::with_capacity(steps);
    for n in 0..steps {
        solver.step_fields(&mut state);
        solver.inject(&mut state, from, src.sample(n));
        out.push(solver.probe(&state, to));
    }
    out
}

/// Energy returned by the absorbing layer at a probe near the domain center,
/// relative to the energy of the direct pulse, in dB. The boundary
/// reflection is isolated by subtracting the response of a domain enlarged
/// by 20 m on every side, whose own reflections arrive after the window.
pub fn pml_reflection_db(medium: &MediumParams) -> f64 {
    let cfg = SimConfig::desk(medium);
    let mut big = cfg.clone();
    big.region_half_x += 20.0;
    big.region_half_y += 20.0;
    let steps = (0.12 / cfg.time_step) as usize;
    let (from, to) = (Point::new(0.0, 0.0), Point::new(1.0, 0.5));
    let near = point_response(medium, &cfg, from, to, steps);
    let far = point_response(medium, &big, from, to, steps);
    let reflected: f64 = near.iter().zip(&far).map(|(a, b)| (a - b) * (a - b)).sum();
    let incident: f64 = far.iter().map(|v| v * v).sum();
    10.0 * (reflected / incident).log10()
}

/// RMS difference between the A->B and B->A responses relative to the RMS
/// of the A->B response.
pub fn reciprocity_error(medium: &MediumParams) -> f64 {
    let cfg = SimConfig::desk(medium);
    let a = cfg.source_position;
    let b = Point::new(3.0, 4.0);
    let steps = cfg.step_count();
    let ab = point_response(medium, &cfg, a, b, steps);
    let ba = point_response(medium, &cfg, b, a, steps);
    let diff: f64 = ab.iter().zip(&ba).map(|(x, y)| (x - y) * (x - y)).sum();
    let norm: f64 = ab.iter().map(|x| x * x).sum();
    (diff / norm).sqrt()
}

/// Largest |pressure| anywhere on the grid during a free-field run, relative
/// to the source peak (which is 1).
pub fn free_field_peak_ratio(medium: &MediumParams) -> f64 {
    let cfg = SimConfig::desk(medium);
    let solver = Solver::new(&OccupancyGrid::empty(cfg.slice), medium, &cfg).unwrap();
    let src = make_source(&cfg).unwrap();
    let mut state = solver.zero_state();
    let mut peak = 0.0f64;
    for n in 0..cfg.step_count() {
        solver.step(&mut state, src.sample(n));
        let m = state
            .pressure_x
            .iter()
            .zip(&state.pressure_y)
            .fold(0.0f64, |m, (a, b)| m.max((a + b).abs()));
        assert!(m.is_finite());
        peak = peak.max(m);
    }
    let src_peak = src.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    peak / src_peak
}

/// Least-squares slope of log(energy) against log(distance from source)
/// along the two pixel rows flanking the x-axis, for 4 m <= r <= 14 m in
/// front of the source. Returns one slope per band.
pub fn free_field_decay_slopes(field: &BandEnergyField, source: Point) -> Vec<f64> {
    let spec = field.spec;
    let res = spec.resolution;
    (0..field.bands.len())
        .map(|band| {
            let mut pts = Vec::new();
            for row in [res / 2 - 1, res / 2] {
                for col in 0..res {
                    let c = spec.cell_center(col, row);
                    let r = (c.x - source.x).hypot(c.y - source.y);
                    if c.x > source.x && (4.0..=14.0).contains(&r) {
                        pts.push((r.ln(), field.at(band, col, row).ln()));
                    }
                }
            }
            let n = pts.len() as f64;
            let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
            let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
            let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
            let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
            sxy / sxx
        })
        .collect()
}

/// Largest relative difference between a field and its y-mirror.
pub fn y_mirror_error(field: &BandEnergyField) -> f64 {
    let res = field.spec.resolution;
    let mut worst = 0.0f64;
    for band in 0..field.bands.len() {
        for row in 0..res {
            for col in 0..res {
                let a = field.at(band, col, row);
                let b = field.at(band, col, res - 1 - row);
                let scale = a.abs().max(b.abs());
                if scale > 0.0 {
                    worst = worst.max((a - b).abs() / scale);
                }
            }
        }
    }
    worst
}

/// Mean loudness per band over the geometric shadow of an object centered
/// at the origin (x in [2, 8] m, |y| < 1 m) and over the lit flanks at the
/// same range (|y| > (x + 6) / 5 + 1.5 m).
pub fn shadow_and_lit_means(loudness: &LoudnessField) -> Vec<(f64, f64)> {
    let spec = loudness.spec;
    let res = spec.resolution;
    (0..loudness.band_count())
        .map(|band| {
            let (mut shadow, mut ns, mut lit, mut nl) = (0.0, 0usize, 0.0, 0usize);
            for row in 0..res {
                for col in 0..res {
                    let c = spec.cell_center(col, row);
                    if !(2.0..=8.0).contains(&c.x) {
                        continue;
                    }
                    let v = loudness.at(band, col, row) as f64;
                    if c.y.abs() < 1.0 {
                        shadow += v;
                        ns += 1;
                    } else if c.y.abs() > (c.x + 6.0) / 5.0 + 1.5 {
                        lit += v;
                        nl += 1;
                    }
                }
            }
            (shadow / ns as f64, lit / nl as f64)
        })
        .collect()
}

pub fn simulate_loudness(
    occupancy: &OccupancyGrid,
    medium: &MediumParams,
    cfg: &SimConfig,
    bands: &BandSet,
    free: &BandEnergyField,
) -> LoudnessField {
    let run = run_simulation(occupancy, medium, cfg, bands).unwrap();
    loudness_from_energies(&run.field, free, occupancy.clone(), DEFAULT_CLAMP_DB).unwrap()
}
