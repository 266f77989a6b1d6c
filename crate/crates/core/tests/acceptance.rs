//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Expensive artifacts (the desk dataset, the long training runs) live in a
//! work directory keyed by their configuration hash, so an interrupted run
//! resumes and a repeated run reuses them. Set `ACCEPTANCE_DIR` to move it.
//! A failing criterion is reported, not fatal; `ACCEPTANCE_STRICT=1` turns
//! failures into a nonzero exit.

mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use common::physics::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use scatter_core::dataset::*;
use scatter_core::encoder::{accumulate_band_energy, encode_entry, BandSet};
use scatter_core::geometry::{canonical_shape, rasterize, CanonicalShape, OccupancyGrid};
use scatter_core::kv::KvMap;
use scatter_core::solver::{free_field_reference, run_simulation, MediumParams, SimConfig};
use scatter_core::train::*;
use scatter_nn::gradcheck::{worst_over_seeds, CASES, TOL};
use scatter_nn::Tensor;

const DESK_SEED: u64 = 2024;
const OVERFIT_ITERATIONS: u64 = 3000;
const OVERFIT_TARGET: f64 = 0.25;
const DESK_ITERATIONS: u64 = 10_000;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

type Check<'a> = Box<dyn FnOnce() -> Result<Outcome, String> + 'a>;

fn work_dir() -> PathBuf {
    std::env::var_os("ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance"))
}

fn desk_config() -> DatasetConfig {
    DatasetConfig::desk(DESK_SEED)
}

fn desk_train_config(dataset: &Path) -> TrainConfig {
    let mut c = TrainConfig::desk(dataset.to_path_buf(), 2);
    c.iterations = DESK_ITERATIONS;
    c.checkpoint_every = 500;
    c.seed = DESK_SEED;
    c
}

fn short_hash(text: &str) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(text.as_bytes()))[..12].to_string()
}

/// The desk dataset, built (or resumed) on first use.
fn desk_dataset(root: &Path) -> Result<Dataset, String> {
    let cfg = desk_config();
    let dir = root.join(format!("desk_dataset_{}", &cfg.hash()[..12]));
    if let Ok(ds) = Dataset::open(&dir) {
        return Ok(ds);
    }
    let start = Instant::now();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    build_dataset(&cfg, &dir, workers).map_err(|e| e.to_string())?;
    println!("  built desk dataset in {:.0} s with {workers} workers", start.elapsed().as_secs_f64());
    Dataset::open(&dir).map_err(|e| e.to_string())
}

fn criterion1() -> Result<Outcome, String> {
    let m = MediumParams::default();
    let cfg = SimConfig::desk(&m);
    let bands = BandSet::octaves(2).unwrap();
    let free = free_field_reference(&m, &cfg, &bands, None).map_err(|e| e.to_string())?;
    let l = encode_entry(&OccupancyGrid::empty(cfg.slice), &m, &cfg, &bands, &free).map_err(|e| e.to_string())?;
    let worst = l.loudness.values.iter().fold(0.0f32, |a, v| a.max(v.abs()));
    Ok(outcome(worst <= 0.01, format!("max |L| on an empty scene = {worst:.2e} dB (limit 0.01)")))
}

fn criterion2() -> Result<Outcome, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let bands = BandSet::octaves(3).unwrap();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.gen_range(600..3000);
        let fs: f64 = rng.gen_range(2100.0..8000.0);
        let series: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let got = accumulate_band_energy(&series, &bands, fs).map_err(|e| e.to_string())?;
        let mut buf: Vec<Complex<f64>> = series.iter().map(|&x| Complex::new(x, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let d_omega = std::f64::consts::TAU * fs / n as f64;
        let mut want = vec![0.0; bands.len()];
        for (k, x) in buf.iter().enumerate() {
            let omega = k.min(n - k) as f64 * d_omega;
            let e = bands.edges();
            if let Some(b) = (0..bands.len()).find(|&b| omega >= e[b] && omega < e[b + 1]) {
                want[b] += (x.norm() / fs).powi(2) * d_omega / bands.band_width(b);
            }
        }
        for (g, w) in got.iter().zip(&want) {
            worst = worst.max((g - w).abs() / w.abs());
        }
    }
    Ok(outcome(worst <= 1e-9, format!("worst relative deviation from FFT over 100 signals = {worst:.2e} (limit 1e-9)")))
}

fn criterion3() -> Result<Outcome, String> {
    let m = MediumParams::default();
    let cfg = SimConfig::desk(&m);
    let bands = BandSet::octaves(2).unwrap();
    let peak = free_field_peak_ratio(&m);
    let pml = pml_reflection_db(&m);
    let free = run_simulation(&OccupancyGrid::empty(cfg.slice), &m, &cfg, &bands).map_err(|e| e.to_string())?;
    let slopes = free_field_decay_slopes(&free.field, cfg.source_position);
    let square = rasterize(&canonical_shape(CanonicalShape::Square), cfg.slice).map_err(|e| e.to_string())?;
    let sq = run_simulation(&square, &m, &cfg, &bands).map_err(|e| e.to_string())?;
    let mirror = y_mirror_error(&free.field).max(y_mirror_error(&sq.field));
    let pass = peak.is_finite()
        && peak <= 10.0
        && pml < -30.0
        && slopes.iter().all(|s| (s + 1.0).abs() < 0.1)
        && mirror < 1e-6;
    Ok(outcome(
        pass,
        format!(
            "peak/source {peak:.2}, PML reflection {pml:.1} dB, energy-vs-r slopes {:?} (want -1 +/- 10%), y-mirror error {mirror:.1e}",
            slopes.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>()
        ),
    ))
}

fn criterion4() -> Result<Outcome, String> {
    let mut worst = ("", 0.0f64, 0u64);
    for (name, case) in CASES {
        let (err, seed) = worst_over_seeds(case, 10);
        if !(err <= worst.1) {
            worst = (name, err, seed);
        }
    }
    Ok(outcome(
        worst.1 < TOL,
        format!("{} cases x 10 seeds; worst {} (seed {}) at {:.2e} (limit {TOL:.0e})", CASES.len(), worst.0, worst.2, worst.1),
    ))
}

/// Eight fixed training entries, one per vertex count 3..=10.
fn overfit_batch(ds: &Dataset) -> Result<(Tensor, Tensor), String> {
    let train = ds.split(Split::Train);
    let picked: Vec<DatasetEntry> =
        (3..=10).map(|n| train.iter().find(|e| e.key.n_vertices == n && e.key.index == 0).cloned().unwrap()).collect();
    let t = SplitTensors::from_entries(&picked).map_err(|e| e.to_string())?;
    Ok((t.inputs, t.targets))
}

fn criterion5(root: &Path) -> Result<Outcome, String> {
    let ds = desk_dataset(root)?;
    let cfg = desk_train_config(&ds.dir);
    let key = short_hash(&format!("{}{}{OVERFIT_ITERATIONS}", ds.config.hash(), cfg.to_kv().to_text()));
    let cache = root.join(format!("overfit_{key}.kv"));
    let kv = match fs::read_to_string(&cache).ok().and_then(|t| KvMap::parse(&t).ok()) {
        Some(kv) => kv,
        None => {
            let (x, y) = overfit_batch(&ds)?;
            let mut t = Trainer::new(cfg.model.clone(), cfg.sgd(), 8, cfg.seed, false).map_err(|e| e.to_string())?;
            let start = Instant::now();
            let (mut best, mut reached) = (f64::INFINITY, None);
            let mut first = 0.0;
            for it in 1..=OVERFIT_ITERATIONS {
                let loss = t.step_on(&x, &y).map_err(|e| e.to_string())?;
                if it == 1 {
                    first = loss;
                }
                best = best.min(loss);
                if loss < OVERFIT_TARGET && reached.is_none() {
                    reached = Some(it);
                    break;
                }
                if it % 500 == 0 {
                    println!("  overfit iteration {it}: loss {loss:.4} dB^2");
                }
            }
            let mut kv = KvMap::new();
            kv.insert("first_loss", format!("{first:?}"));
            kv.insert("best_loss", format!("{best:?}"));
            kv.insert("reached_at", reached.map_or("never".to_string(), |i| i.to_string()));
            kv.insert("wall_seconds", format!("{:.0}", start.elapsed().as_secs_f64()));
            fs::write(&cache, kv.to_text()).map_err(|e| e.to_string())?;
            kv
        }
    };
    let reached = kv.get("reached_at").unwrap_or("never");
    let best: f64 = kv.get_parsed("best_loss").ok().flatten().unwrap_or(f64::INFINITY);
    Ok(outcome(
        reached != "never",
        format!(
            "27-FRRU desk model ({} parameters) on 8 entries: first MSE {} dB^2, best {best:.4} dB^2, below {OVERFIT_TARGET} at iteration {reached} (budget {OVERFIT_ITERATIONS}), {} s",
            scatter_nn::Module::parameter_count(
                &scatter_nn::Frrn::new(cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
            ),
            kv.get("first_loss").unwrap_or("?"),
            kv.get("wall_seconds").unwrap_or("?"),
        ),
    ))
}

/// Trains the desk model to completion (resuming if interrupted) and
/// returns the run directory.
fn desk_run(root: &Path, ds: &Dataset) -> Result<PathBuf, String> {
    let cfg = desk_train_config(&ds.dir);
    let mut key_kv = cfg.to_kv();
    key_kv.insert("dataset", "");
    let dir = root.join(format!("desk_run_{}", short_hash(&format!("{}{}", ds.config.hash(), key_kv.to_text()))));
    let done = load_checkpoint(&dir.join(LATEST_CHECKPOINT)).is_ok_and(|m| m.iteration >= cfg.iterations);
    if !done {
        let out = train(&cfg, ds, &dir, true).map_err(|e| e.to_string())?;
        println!(
            "  trained to iteration {} in {:.0} s, best validation RMSE {:.3} dB",
            out.iterations,
            out.wall_time.as_secs_f64(),
            out.best_val_rmse.unwrap_or(f64::NAN)
        );
    }
    Ok(dir)
}

struct DeskResult {
    report: EvalReport,
}

fn criterion6(root: &Path) -> Result<(Outcome, DeskResult), String> {
    let ds = desk_dataset(root)?;
    let run = desk_run(root, &ds)?;
    let mut model = load_checkpoint(&run.join(BEST_CHECKPOINT)).map_err(|e| e.to_string())?;
    let report = evaluate(&mut model, &ds, Split::Test).map_err(|e| e.to_string())?;
    let test = ds.tensors(Split::Test).map_err(|e| e.to_string())?;
    let mut baseline = EvalAccumulator::new(ds.config.grid(), ds.config.bands.len());
    let zeros = vec![0.0f32; test.targets.sample(0).len()];
    for i in 0..test.len() {
        let mask = ds.split(Split::Test)[i].input.clone();
        baseline.add(&zeros, test.targets.sample(i), &mask).map_err(|e| e.to_string())?;
    }
    let baseline = baseline.finish(None);
    let mut pass = true;
    let mut parts = Vec::new();
    for b in 0..report.band_count {
        let (rmse, base) = (report.rmse[b], baseline.rmse[b]);
        let gain = 1.0 - rmse / base;
        let (shadow, lit) = report.maxae_half_plane_means(b);
        pass &= rmse < 3.0 && gain >= 0.4 && shadow > lit;
        parts.push(format!(
            "band {b}: RMSE {rmse:.3} dB vs 0 dB baseline {base:.3} dB ({:.0}% better), MaxAE mean shadow {shadow:.2} / lit {lit:.2} dB",
            100.0 * gain
        ));
    }
    let detail = format!(
        "checkpoint iteration {}, {} test entries; {}",
        model.iteration,
        report.entries,
        parts.join("; ")
    );
    Ok((outcome(pass, detail), DeskResult { report }))
}

fn criterion7(root: &Path, desk: &DeskResult) -> Result<Outcome, String> {
    let ds = desk_dataset(root)?;
    let run = desk_run(root, &ds)?;
    let mut model = load_checkpoint(&run.join(BEST_CHECKPOINT)).map_err(|e| e.to_string())?;
    let results = generalization_suite(&mut model, &ds.config, Some(&ds.dir.join("cache"))).map_err(|e| e.to_string())?;
    let mut pass = true;
    let mut parts = Vec::new();
    for r in &results {
        let ratios: Vec<f64> = r.rmse.iter().zip(&desk.report.rmse).map(|(s, t)| s / t).collect();
        pass &= ratios.iter().all(|&q| q < 2.0);
        parts.push(format!(
            "{} RMSE {} dB ({}x test)",
            r.shape.name(),
            r.rmse.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join("/"),
            ratios.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join("/")
        ));
        if r.shape == CanonicalShape::Square {
            pass &= r.front_asymmetry.iter().all(|&a| a < 1.5);
            let whole: Vec<String> =
                (0..r.rmse.len()).map(|b| format!("{:.2}", front_asymmetry(&r.prediction, b, f64::INFINITY))).collect();
            parts.push(format!(
                "square mirror asymmetry in front {} dB (limit 1.5), whole field {} dB",
                r.front_asymmetry.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join("/"),
                whole.join("/")
            ));
        }
    }
    Ok(outcome(pass, parts.join("; ")))
}

fn median(mut v: Vec<Duration>) -> Duration {
    v.sort();
    v[v.len() / 2]
}

fn criterion8(root: &Path) -> Result<Outcome, String> {
    let ds = desk_dataset(root)?;
    let run = desk_run(root, &ds)?;
    let cfg = &ds.config;
    let occ = rasterize(&canonical_shape(CanonicalShape::Square), cfg.grid()).map_err(|e| e.to_string())?;
    let solver: Vec<Duration> = (0..3)
        .map(|_| {
            let t = Instant::now();
            run_simulation(&occ, &cfg.medium, &cfg.sim, &cfg.bands).map(|_| t.elapsed())
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mut model = load_checkpoint(&run.join(BEST_CHECKPOINT)).map_err(|e| e.to_string())?;
    predict(&mut model, &occ).map_err(|e| e.to_string())?;
    let infer: Vec<Duration> =
        (0..21).map(|_| predict(&mut model, &occ).map(|r| r.1)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let (s, i) = (median(solver), median(infer));
    let ratio = s.as_secs_f64() / i.as_secs_f64();
    Ok(outcome(
        ratio >= 100.0,
        format!(
            "single thread at {0}x{0}: solver {1:.1} ms, inference {2:.2} ms, speedup {ratio:.1}x (need >= 100x)",
            cfg.grid().resolution,
            s.as_secs_f64() * 1e3,
            i.as_secs_f64() * 1e3
        ),
    ))
}

fn dir_bytes(dir: &Path, ext: &[&str]) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .map(|d| d.flatten().map(|e| e.path()).collect())
        .unwrap_or_else(|_| Vec::new())
        .into_iter()
        .filter(|p: &PathBuf| p.extension().is_some_and(|e| ext.iter().any(|x| e == *x)))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

/// Two complete reduced pipelines from scratch with the same seeds.
fn criterion9(root: &Path, built: &mut Vec<Dataset>) -> Result<Outcome, String> {
    let mut cfg = DatasetConfig::desk(9);
    cfg.sizes = SplitSizes { train: 1, val: 1, test: 1 };
    cfg.min_vertices = 3;
    cfg.max_vertices = 6;
    let base = root.join("reproducibility");
    let _ = fs::remove_dir_all(&base);
    let mut runs = Vec::new();
    for (k, workers) in [(0, 1), (1, 2)] {
        let dir = base.join(format!("run{k}"));
        build_dataset(&cfg, &dir.join("data"), workers).map_err(|e| e.to_string())?;
        let ds = Dataset::open(&dir.join("data")).map_err(|e| e.to_string())?;
        let mut tc = TrainConfig::desk(ds.dir.clone(), 2);
        tc.batch_size = 4;
        tc.iterations = 30;
        tc.checkpoint_every = 10;
        tc.seed = 9;
        train(&tc, &ds, &dir.join("run"), false).map_err(|e| e.to_string())?;
        let mut m = load_checkpoint(&dir.join("run").join(BEST_CHECKPOINT)).map_err(|e| e.to_string())?;
        let report = evaluate(&mut m, &ds, Split::Test).map_err(|e| e.to_string())?;
        runs.push((dir, report.metrics_kv()));
        built.push(ds);
    }
    let shards = dir_bytes(&runs[0].0.join("data"), &["shard", "txt"]);
    let same_shards = shards == dir_bytes(&runs[1].0.join("data"), &["shard", "txt"]);
    let ckpts = dir_bytes(&runs[0].0.join("run"), &["ckpt", "txt"]);
    let same_ckpts = ckpts == dir_bytes(&runs[1].0.join("run"), &["ckpt", "txt"]);
    let same_reports = runs[0].1 == runs[1].1;
    Ok(outcome(
        same_shards && same_ckpts && same_reports && !shards.is_empty() && !ckpts.is_empty(),
        format!(
            "two runs (1 vs 2 workers): {} shard/manifest files identical: {same_shards}; {} checkpoint/log files identical: {same_ckpts}; EvalReports identical: {same_reports}",
            shards.len(),
            ckpts.len()
        ),
    ))
}

fn criterion10(root: &Path, built: &[Dataset]) -> Result<Outcome, String> {
    let desk = desk_dataset(root)?;
    let mut parts = Vec::new();
    let mut pass = true;
    for ds in std::iter::once(&desk).chain(built) {
        let r = verify_disjoint(ds.entries());
        pass &= r.is_disjoint();
        parts.push(format!("{} entries, {} collisions", r.train + r.val + r.test, r.collisions.len()));
    }
    // The checker must notice a planted copy of a training entry in test.
    let mut planted: Vec<DatasetEntry> = desk.entries().cloned().collect();
    let mut copy = desk.split(Split::Train)[0].clone();
    copy.key.split = Split::Test;
    copy.key.index = 999;
    planted.push(copy);
    let caught = !verify_disjoint(&planted).is_disjoint();
    pass &= caught;
    Ok(outcome(pass, format!("{}; planted duplicate detected: {caught}", parts.join("; "))))
}

fn main() {
    let root = work_dir();
    fs::create_dir_all(&root).expect("create acceptance work dir");
    println!("acceptance work dir: {}", root.display());
    let mut results: Vec<(u8, Outcome, Duration)> = Vec::new();
    let mut run = |n: u8, check: Check| {
        let start = Instant::now();
        let o = check().unwrap_or_else(|e| outcome(false, format!("error: {e}")));
        let took = start.elapsed();
        println!("criterion {n:>2}: {} - {} [{:.1} s]", if o.pass { "PASS" } else { "FAIL" }, o.detail, took.as_secs_f64());
        results.push((n, o, took));
    };
    run(1, Box::new(criterion1));
    run(2, Box::new(criterion2));
    run(3, Box::new(criterion3));
    run(4, Box::new(criterion4));
    run(5, Box::new(|| criterion5(&root)));
    let mut desk = None;
    run(
        6,
        Box::new(|| {
            let (o, d) = criterion6(&root)?;
            desk = Some(d);
            Ok(o)
        }),
    );
    run(
        7,
        Box::new(|| match &desk {
            Some(d) => criterion7(&root, d),
            None => Err("needs the desk evaluation of criterion 6".into()),
        }),
    );
    run(8, Box::new(|| criterion8(&root)));
    let mut built = Vec::new();
    run(9, Box::new(|| criterion9(&root, &mut built)));
    run(10, Box::new(|| criterion10(&root, &built)));

    println!("\nsummary");
    for (n, o, _) in &results {
        println!("criterion {n:>2}: {}", if o.pass { "PASS" } else { "FAIL" });
    }
    let failed = results.iter().filter(|r| !r.1.pass).count();
    println!("{} of {} criteria pass", results.len() - failed, results.len());
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
