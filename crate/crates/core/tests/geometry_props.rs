use std::f64::consts::TAU;

use proptest::prelude::*;
use scatter_core::geometry::*;

fn quarter_turn(p: &Polygon) -> Polygon {
    Polygon::new(p.vertices().iter().map(|v| Point::new(-v.y, v.x)).collect()).unwrap()
}

fn object() -> impl Strategy<Value = (usize, u64)> {
    (MIN_VERTICES..=MAX_VERTICES, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rows_are_single_runs((n, seed) in object(), res in prop::sample::select(vec![16usize, 32, 64])) {
        let occ = rasterize(&sample_random_object(n, seed).unwrap(), GridSpec::new(res, 16.0).unwrap()).unwrap();
        for row in 0..res {
            let runs = (0..res).filter(|&c| occ.get(c, row) && (c == 0 || !occ.get(c - 1, row))).count();
            prop_assert!(runs <= 1, "row {row} has {runs} runs");
        }
    }

    #[test]
    fn quarter_turn_equivariance((n, seed) in object()) {
        let spec = GridSpec::new(64, 16.0).unwrap();
        let p = sample_random_object(n, seed).unwrap();
        let a = rasterize(&quarter_turn(&p), spec).unwrap();
        let b = rasterize(&p, spec).unwrap().rotate_quarter();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn deterministic((n, seed) in object()) {
        let spec = GridSpec::desk();
        prop_assert_eq!(
            rasterize(&sample_random_object(n, seed).unwrap(), spec).unwrap(),
            rasterize(&sample_random_object(n, seed).unwrap(), spec).unwrap()
        );
    }

    /// Shrinking toward the origin nests the scaled copies when the polygon
    /// contains the origin, so occupied counts cannot grow.
    #[test]
    fn shrinking_never_adds_cells(
        (n, seed) in object(),
        rotation in 0.0..TAU,
        sx in 0.25f64..=1.0, sy in 0.25f64..=1.0, fx in 0.0f64..=1.0, fy in 0.0f64..=1.0,
    ) {
        let base = generate_convex_polygon(n, seed).unwrap();
        prop_assume!(base.contains(Point::new(0.0, 0.0)));
        let (sx2, sy2) = (0.25 + (sx - 0.25) * fx, 0.25 + (sy - 0.25) * fy);
        let spec = GridSpec::desk();
        let big = rasterize(&transform_polygon(&base, rotation, sx, sy).unwrap(), spec).unwrap();
        let small = rasterize(&transform_polygon(&base, rotation, sx2, sy2).unwrap(), spec).unwrap();
        prop_assert!(small.occupied_count() <= big.occupied_count());
    }
}

/// Vertex angles over 10^4 draws against a uniform distribution: chi-square
/// with 19 degrees of freedom below its 0.1% critical value.
#[test]
fn vertex_angles_are_uniform() {
    let bins = 20;
    let mut counts = vec![0usize; bins];
    for seed in 0..10_000u64 {
        let p = generate_convex_polygon(3 + (seed % 18) as usize, seed).unwrap();
        for v in p.vertices() {
            let t = v.y.atan2(v.x).rem_euclid(TAU);
            counts[((t / TAU * bins as f64) as usize).min(bins - 1)] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let expected = total as f64 / bins as f64;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    assert!(chi2 < 43.82, "chi-square {chi2:.1} over {total} angles");
}

#[test]
fn random_objects_stay_in_the_object_region() {
    for seed in 0..2000u64 {
        let p = sample_random_object(3 + (seed % 18) as usize, seed).unwrap();
        let (x0, y0, x1, y1) = p.bounds();
        let h = OBJECT_HALF_EXTENT + 1e-12;
        assert!(x0 >= -h && y0 >= -h && x1 <= h && y1 <= h);
        assert!(p.is_strictly_convex() && p.len() >= 3);
    }
}
