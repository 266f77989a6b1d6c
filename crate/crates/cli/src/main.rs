//! `scatter`: shape generation, simulation, dataset building, training,
//! evaluation, prediction and rendering from the command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use scatter_core::dataset::{build_dataset, load_field, save_field, Dataset, DatasetConfig, Split};
use scatter_core::encoder::encode_entry_cached;
use scatter_core::geometry::{
    canonical_shape, rasterize, sample_random_object, CanonicalShape, Polygon, MAX_VERTICES, MIN_VERTICES,
};
use scatter_core::kv::{file_sha256, KvMap};
use scatter_core::render::{heatmap, plane_image, sequential, triptych};
use scatter_core::train::{
    evaluate, generalization_suite, load_checkpoint, predict, train, TrainConfig,
};

/// Environment variable naming the default data directory.
const DATA_DIR_ENV: &str = "SCATTER_DATA_DIR";

#[derive(Parser, Debug)]
#[command(name = "scatter", version, about = "Learned acoustic scattering of convex objects")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write random convex polygons (or the canonical test shapes) as text files.
    GenShapes(GenShapesArgs),
    /// Simulate one object and write its loudness field.
    Simulate(SimulateArgs),
    /// Build a train/val/test dataset of simulated loudness fields.
    BuildDataset(BuildDatasetArgs),
    /// Train the network on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one dataset split.
    Eval(EvalArgs),
    /// Predict the loudness field of one polygon.
    Predict(PredictArgs),
    /// Compare predictions with simulations for the canonical shapes.
    Generalize(GeneralizeArgs),
    /// Render a field file as per-band heatmaps (or triptychs against a reference).
    Render(RenderArgs),
}

/// Dataset and solver settings shared by commands that simulate.
#[derive(Args, Debug, Default)]
struct SimFlags {
    /// Key-value config file; explicit flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pixels per side of the extraction slice (power of two).
    #[arg(long)]
    resolution: Option<usize>,
    /// Number of octave bands starting at 125 Hz.
    #[arg(long)]
    bands: Option<usize>,
    /// Side length of the extraction slice in metres.
    #[arg(long)]
    extent: Option<f64>,
}

impl SimFlags {
    fn overrides(&self) -> Result<KvMap> {
        let mut kv = match &self.config {
            Some(p) => KvMap::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
            None => KvMap::new(),
        };
        if let Some(r) = self.resolution {
            kv.insert("resolution", r);
        }
        if let Some(b) = self.bands {
            kv.insert("bands", b);
        }
        if let Some(e) = self.extent {
            kv.insert("extent", e);
        }
        Ok(kv)
    }
}

#[derive(Args, Debug)]
struct GenShapesArgs {
    /// Number of random shapes.
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// Vertex count; drawn uniformly from 3..=20 per shape when omitted.
    #[arg(long)]
    n_vertices: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the four canonical shapes instead of random ones.
    #[arg(long)]
    canonical: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Canonical shape: bar, square, circle or ellipse.
    #[arg(long, conflicts_with = "shape_file", required_unless_present = "shape_file")]
    shape: Option<CanonicalShape>,
    /// Polygon text file, one `x y` vertex per line.
    #[arg(long)]
    shape_file: Option<PathBuf>,
    /// Output field file.
    #[arg(long)]
    out: PathBuf,
    /// Free-field cache directory (default: <data dir>/cache).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Default data directory.
    #[arg(long, env = DATA_DIR_ENV, default_value = "data")]
    data_dir: PathBuf,
    #[command(flatten)]
    sim: SimFlags,
}

#[derive(Args, Debug)]
struct BuildDatasetArgs {
    /// Training entries per vertex count.
    #[arg(long)]
    k_train: Option<usize>,
    /// Validation entries per vertex count.
    #[arg(long)]
    k_val: Option<usize>,
    /// Test entries per vertex count.
    #[arg(long)]
    k_test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel simulation workers.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Output directory (default: the data directory).
    #[arg(long, env = DATA_DIR_ENV, default_value = "data")]
    out_dir: PathBuf,
    #[command(flatten)]
    sim: SimFlags,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Key-value training config (`model.*` keys configure the network).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, env = DATA_DIR_ENV, default_value = "data")]
    dataset: PathBuf,
    /// Directory for checkpoints and logs.
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from the latest checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// train, val or test.
    #[arg(long, default_value = "test")]
    split: Split,
    #[arg(long, env = DATA_DIR_ENV, default_value = "data")]
    dataset: PathBuf,
    /// Directory for the report and MaxAE heatmaps.
    #[arg(long, default_value = "eval")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Polygon text file, one `x y` vertex per line.
    #[arg(long)]
    shape_file: PathBuf,
    /// Output field file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GeneralizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset whose simulation settings produce the references.
    #[arg(long, env = DATA_DIR_ENV, default_value = "data")]
    dataset: PathBuf,
    #[arg(long, default_value = "generalize")]
    out_dir: PathBuf,
    /// Pixel block size of each grid cell in images.
    #[arg(long, default_value_t = 4)]
    scale: usize,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Field file to render.
    field: PathBuf,
    /// Reference field; renders reference/prediction/error triptychs.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Output directory (default: next to the field file).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Pixel block size of each grid cell.
    #[arg(long, default_value_t = 4)]
    scale: usize,
    /// Error at which the error panel saturates, in dB.
    #[arg(long, default_value_t = 10.0)]
    error_max_db: f32,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenShapes(a) => gen_shapes(a),
        Command::Simulate(a) => simulate(a),
        Command::BuildDataset(a) => build(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Predict(a) => predict_cmd(a),
        Command::Generalize(a) => generalize_cmd(a),
        Command::Render(a) => render_cmd(a),
    }
}

/// Resolved configuration and input hashes written next to each output.
struct Provenance {
    kv: KvMap,
}

impl Provenance {
    fn new(command: &str, config: &KvMap) -> Self {
        let mut kv = KvMap::new();
        kv.insert("command", command);
        kv.insert("version", env!("CARGO_PKG_VERSION"));
        for (k, v) in config.iter() {
            kv.insert(format!("config.{k}"), v);
        }
        log::info!("{command} configuration:\n{}", config.to_text().trim_end());
        Self { kv }
    }

    fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.kv.insert(format!("input.{name}.path"), path.display());
        self.kv.insert(format!("input.{name}.sha256"), file_sha256(path).with_context(|| format!("hashing {}", path.display()))?);
        Ok(())
    }

    fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.kv.to_text()).with_context(|| format!("writing {}", path.display()))
    }
}

/// `foo.bin` -> `foo.provenance.txt`.
fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("provenance.txt")
}

fn dataset_config(flags: &SimFlags, extra: &KvMap) -> Result<DatasetConfig> {
    let mut kv = flags.overrides()?;
    kv.merge(extra);
    let mut cfg = DatasetConfig::desk(0);
    cfg.apply_overrides(&kv)?;
    Ok(cfg)
}

fn gen_shapes(a: GenShapesArgs) -> Result<()> {
    fs::create_dir_all(&a.out_dir)?;
    let mut config = KvMap::new();
    config.insert("canonical", a.canonical);
    config.insert("count", a.count);
    config.insert("seed", a.seed);
    if let Some(n) = a.n_vertices {
        if !(MIN_VERTICES..=MAX_VERTICES).contains(&n) {
            bail!("--n-vertices must be in {MIN_VERTICES}..={MAX_VERTICES}");
        }
        config.insert("n_vertices", n);
    }
    let shapes: Vec<(String, Polygon)> = if a.canonical {
        CanonicalShape::ALL.iter().map(|&s| (s.name().to_string(), canonical_shape(s))).collect()
    } else {
        (0..a.count)
            .map(|i| {
                let seed = a.seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
                let n = a.n_vertices.unwrap_or(MIN_VERTICES + (seed % (MAX_VERTICES - MIN_VERTICES + 1) as u64) as usize);
                Ok((format!("shape_{i:04}"), sample_random_object(n, seed)?))
            })
            .collect::<Result<_>>()?
    };
    for (name, p) in &shapes {
        fs::write(a.out_dir.join(format!("{name}.txt")), p.to_text())?;
    }
    Provenance::new("gen-shapes", &config).write(&a.out_dir.join("provenance.txt"))?;
    log::info!("wrote {} shapes to {}", shapes.len(), a.out_dir.display());
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let cfg = dataset_config(&a.sim, &KvMap::new())?;
    let mut prov = Provenance::new("simulate", &cfg.to_kv());
    let (polygon, label) = match (&a.shape, &a.shape_file) {
        (Some(s), _) => (canonical_shape(*s), s.name().to_string()),
        (None, Some(f)) => {
            prov.input("shape", f)?;
            (Polygon::from_text(&fs::read_to_string(f)?)?, f.display().to_string())
        }
        (None, None) => bail!("one of --shape or --shape-file is required"),
    };
    let occ = rasterize(&polygon, cfg.grid())?;
    let cache = a.cache_dir.unwrap_or_else(|| a.data_dir.join("cache"));
    let run = encode_entry_cached(&occ, &cfg.medium, &cfg.sim, &cfg.bands, Some(&cache))?;
    let mut field = run.loudness;
    let (lo, hi) = cfg.clamp_db;
    field.values.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
    field.clamp_db = cfg.clamp_db;
    let mut meta = KvMap::new();
    meta.insert("shape", &label);
    meta.insert("steps", run.stats.steps);
    meta.insert("trailing_energy_ratio", format!("{:e}", run.stats.trailing_energy_ratio));
    save_field(&a.out, &field, &meta)?;
    prov.kv.insert("output", a.out.display());
    prov.write(&sidecar(&a.out))?;
    log::info!("simulated {label} in {} steps -> {}", run.stats.steps, a.out.display());
    Ok(())
}

fn build(a: BuildDatasetArgs) -> Result<()> {
    let mut extra = KvMap::new();
    for (k, v) in [("k_train", a.k_train), ("k_val", a.k_val), ("k_test", a.k_test)] {
        if let Some(v) = v {
            extra.insert(k, v);
        }
    }
    if let Some(s) = a.seed {
        extra.insert("seed", s);
    }
    let cfg = dataset_config(&a.sim, &extra)?;
    let mut kv = cfg.to_kv();
    kv.insert("workers", a.workers);
    let prov = Provenance::new("build-dataset", &kv);
    let manifest = build_dataset(&cfg, &a.out_dir, a.workers)?;
    prov.write(&a.out_dir.join("provenance_build.txt"))?;
    log::info!(
        "dataset in {}: {} train, {} val, {} test entries, {} redraws",
        a.out_dir.display(),
        manifest.total(Split::Train),
        manifest.total(Split::Val),
        manifest.total(Split::Test),
        manifest.exclusions.len()
    );
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let dataset = Dataset::open(&a.dataset).with_context(|| format!("opening dataset {}", a.dataset.display()))?;
    let mut cfg = TrainConfig::desk(a.dataset.clone(), dataset.config.bands.len());
    if let Some(p) = &a.config {
        cfg.apply_kv(&KvMap::parse(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?)?;
    }
    cfg.dataset = a.dataset.clone();
    if let Some(v) = a.iterations {
        cfg.iterations = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    let mut prov = Provenance::new("train", &cfg.to_kv());
    prov.input("manifest", &a.dataset.join(scatter_core::dataset::MANIFEST_FILE))?;
    if let Some(p) = &a.config {
        prov.input("config", p)?;
    }
    let outcome = train(&cfg, &dataset, &a.out_dir, a.resume)?;
    prov.kv.insert("iterations", outcome.iterations);
    if let Some(b) = outcome.best_val_rmse {
        prov.kv.insert("best_val_rmse_db", format!("{b:?}"));
    }
    prov.kv.insert("wall_seconds", format!("{:.1}", outcome.wall_time.as_secs_f64()));
    prov.write(&a.out_dir.join("provenance_train.txt"))?;
    log::info!(
        "trained to iteration {} in {:.1} s; best validation RMSE {:?} dB",
        outcome.iterations,
        outcome.wall_time.as_secs_f64(),
        outcome.best_val_rmse
    );
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let dataset = Dataset::open(&a.dataset).with_context(|| format!("opening dataset {}", a.dataset.display()))?;
    let mut model = load_checkpoint(&a.checkpoint)?;
    let mut config = KvMap::new();
    config.insert("split", a.split);
    let mut prov = Provenance::new("eval", &config);
    prov.input("checkpoint", &a.checkpoint)?;
    prov.input("manifest", &a.dataset.join(scatter_core::dataset::MANIFEST_FILE))?;
    let report = evaluate(&mut model, &dataset, a.split)?;
    fs::create_dir_all(&a.out_dir)?;
    fs::write(a.out_dir.join(format!("report_{}.txt", a.split)), report.to_text())?;
    fs::write(a.out_dir.join(format!("report_{}.kv", a.split)), report.to_kv().to_text())?;
    let max_db = (model.meta.clamp_db.1 - model.meta.clamp_db.0).max(1.0);
    for b in 0..report.band_count {
        let img = plane_image(&report.maxae_map[b], report.resolution, 4, None, |v| sequential(v, max_db))?;
        img.save_ppm(&a.out_dir.join(format!("maxae_{}_band{b}.ppm", a.split)))?;
    }
    prov.write(&a.out_dir.join(format!("provenance_eval_{}.txt", a.split)))?;
    print!("{}", report.to_text());
    Ok(())
}

fn predict_cmd(a: PredictArgs) -> Result<()> {
    let mut model = load_checkpoint(&a.checkpoint)?;
    let mut prov = Provenance::new("predict", &KvMap::new());
    prov.input("checkpoint", &a.checkpoint)?;
    prov.input("shape", &a.shape_file)?;
    let polygon = Polygon::from_text(&fs::read_to_string(&a.shape_file)?)?;
    let occ = rasterize(&polygon, model.meta.grid()?)?;
    let (field, elapsed) = predict(&mut model, &occ)?;
    let mut meta = KvMap::new();
    meta.insert("shape", a.shape_file.display());
    meta.insert("checkpoint_iteration", model.iteration);
    save_field(&a.out, &field, &meta)?;
    prov.kv.insert("inference_seconds", format!("{:e}", elapsed.as_secs_f64()));
    prov.write(&sidecar(&a.out))?;
    log::info!("predicted in {:.2} ms -> {}", elapsed.as_secs_f64() * 1e3, a.out.display());
    Ok(())
}

fn generalize_cmd(a: GeneralizeArgs) -> Result<()> {
    let dataset = Dataset::open(&a.dataset).with_context(|| format!("opening dataset {}", a.dataset.display()))?;
    let mut model = load_checkpoint(&a.checkpoint)?;
    let mut prov = Provenance::new("generalize", &dataset.config.to_kv());
    prov.input("checkpoint", &a.checkpoint)?;
    let results = generalization_suite(&mut model, &dataset.config, Some(&a.dataset.join("cache")))?;
    fs::create_dir_all(&a.out_dir)?;
    let mut kv = KvMap::new();
    for r in &results {
        let name = r.shape.name();
        for (b, (rmse, asym)) in r.rmse.iter().zip(&r.front_asymmetry).enumerate() {
            kv.insert(format!("{name}.band{b}.rmse_db"), format!("{rmse:?}"));
            kv.insert(format!("{name}.band{b}.front_asymmetry_db"), format!("{asym:?}"));
            triptych(&r.reference, &r.prediction, b, a.scale, 10.0)?
                .save_ppm(&a.out_dir.join(format!("{name}_band{b}.ppm")))?;
        }
        println!(
            "{name:>8}: RMSE {} dB",
            r.rmse.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" / ")
        );
    }
    fs::write(a.out_dir.join("generalization.kv"), kv.to_text())?;
    prov.write(&a.out_dir.join("provenance_generalize.txt"))?;
    Ok(())
}

fn render_cmd(a: RenderArgs) -> Result<()> {
    let (field, _) = load_field(&a.field).with_context(|| format!("reading {}", a.field.display()))?;
    let out_dir = a.out_dir.clone().unwrap_or_else(|| a.field.parent().unwrap_or(Path::new(".")).to_path_buf());
    fs::create_dir_all(&out_dir)?;
    let stem = a.field.file_stem().map_or("field".into(), |s| s.to_string_lossy().into_owned());
    let mut config = KvMap::new();
    config.insert("scale", a.scale);
    let mut prov = Provenance::new("render", &config);
    prov.input("field", &a.field)?;
    let reference = match &a.reference {
        Some(p) => {
            prov.input("reference", p)?;
            Some(load_field(p).with_context(|| format!("reading {}", p.display()))?.0)
        }
        None => None,
    };
    for b in 0..field.band_count() {
        let img = match &reference {
            Some(r) => triptych(r, &field, b, a.scale, a.error_max_db)?,
            None => heatmap(&field, b, a.scale, true)?,
        };
        let path = out_dir.join(format!("{stem}_band{b}.ppm"));
        img.save_ppm(&path).with_context(|| format!("writing {}", path.display()))?;
        log::info!("wrote {}", path.display());
    }
    prov.write(&out_dir.join(format!("{stem}.render.provenance.txt")))?;
    Ok(())
}
