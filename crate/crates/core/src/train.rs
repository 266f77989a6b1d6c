//! Minibatch SGD training of the FRRN on a built dataset, checkpointing,
//! evaluation (RMSE and per-pixel MaxAE) and prediction.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scatter_nn::checkpoint::Checkpoint;
use scatter_nn::frrn::mse_loss;
use scatter_nn::{Frrn, FrrnConfig, Mode, Module, Sgd, Tensor};

use crate::dataset::{minibatch_order, Dataset, DatasetConfig, Split, SplitTensors};
use crate::encoder::{encode_entry_cached, BandSet, LoudnessField};
use crate::error::{Error, Result};
use crate::geometry::{canonical_shape, rasterize, CanonicalShape, GridSpec, OccupancyGrid};
use crate::kv::KvMap;

pub const LATEST_CHECKPOINT: &str = "latest.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.txt";
/// Batch size used for evaluation forward passes.
const EVAL_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub iterations: u64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub dataset: PathBuf,
    pub model: FrrnConfig,
    /// Exclude object-interior pixels from the loss.
    pub masked_loss: bool,
}

impl TrainConfig {
    /// Desk model with a zero-initialized output layer, so training starts
    /// from the 0 dB free-field prediction.
    pub fn desk(dataset: PathBuf, bands: usize) -> Self {
        let sgd = Sgd::default();
        let mut model = FrrnConfig::desk(bands);
        model.zero_init_output = true;
        Self {
            batch_size: 8,
            lr: sgd.lr,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            iterations: 10_000,
            checkpoint_every: 500,
            seed: 0,
            dataset,
            model,
            masked_loss: false,
        }
    }

    pub fn sgd(&self) -> Sgd {
        Sgd { lr: self.lr, momentum: self.momentum, weight_decay: self.weight_decay }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("batch size must be at least 2 for batch normalization".into()));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("need lr > 0, 0 <= momentum < 1, weight decay >= 0".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint interval must be positive".into()));
        }
        self.model.validate()?;
        Ok(())
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("batch_size", self.batch_size);
        kv.insert("lr", format!("{:?}", self.lr));
        kv.insert("momentum", format!("{:?}", self.momentum));
        kv.insert("weight_decay", format!("{:?}", self.weight_decay));
        kv.insert("iterations", self.iterations);
        kv.insert("checkpoint_every", self.checkpoint_every);
        kv.insert("seed", self.seed);
        kv.insert("dataset", self.dataset.display());
        kv.insert("masked_loss", self.masked_loss);
        for (k, v) in KvMap::parse(&self.model.to_text()).expect("model config text").iter() {
            kv.insert(format!("model.{k}"), v);
        }
        kv
    }

    /// Overrides from `kv`; `model.*` keys configure the network.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        macro_rules! field {
            ($key:literal, $target:expr) => {
                if let Some(v) = kv.get_parsed($key)? {
                    $target = v;
                }
            };
        }
        field!("batch_size", self.batch_size);
        field!("lr", self.lr);
        field!("momentum", self.momentum);
        field!("weight_decay", self.weight_decay);
        field!("iterations", self.iterations);
        field!("checkpoint_every", self.checkpoint_every);
        field!("seed", self.seed);
        field!("masked_loss", self.masked_loss);
        if let Some(d) = kv.get("dataset") {
            self.dataset = PathBuf::from(d);
        }
        let mut model = KvMap::parse(&self.model.to_text())?;
        let mut touched = false;
        for (k, v) in kv.iter() {
            if let Some(k) = k.strip_prefix("model.") {
                model.insert(k, v);
                touched = true;
            }
        }
        if touched {
            self.model = FrrnConfig::from_text(&model.to_text())?;
        }
        Ok(())
    }
}

/// Loss and optimizer state of one training run, independent of files.
pub struct Trainer {
    pub model: Frrn,
    pub sgd: Sgd,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    batch_size: usize,
    shuffle_seed: u64,
    masked_loss: bool,
}

impl Trainer {
    pub fn new(model_config: FrrnConfig, sgd: Sgd, batch_size: usize, seed: u64, masked_loss: bool) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Frrn::new(model_config, &mut rng)?;
        Ok(Self { model, sgd, iteration: 0, rng, batch_size, shuffle_seed: seed, masked_loss })
    }

    /// Entry indices used at `iteration`: epochs are consecutive shuffled
    /// passes, so the schedule depends only on the iteration number.
    pub fn batch_indices(&self, count: usize, iteration: u64) -> Result<Vec<usize>> {
        let per_epoch = count.div_ceil(self.batch_size) as u64;
        let epoch = iteration / per_epoch;
        let order = minibatch_order(count, self.batch_size, self.shuffle_seed, epoch)?;
        let mut batch = order[(iteration % per_epoch) as usize].clone();
        if batch.len() == 1 {
            // A lone trailing sample cannot be batch-normalized; pair it with
            // the first entry of the epoch.
            batch.push(order[0][0]);
        }
        Ok(batch)
    }

    /// One SGD step on the given batch; returns the loss before the update.
    pub fn step_on(&mut self, inputs: &Tensor, targets: &Tensor) -> Result<f64> {
        self.model.zero_grad();
        let pred = self.model.forward(inputs, Mode::Train, true)?;
        let mask = self.masked_loss.then(|| loss_mask(inputs, targets.channels()));
        let (loss, grad) = mse_loss(&pred, targets, mask.as_ref())?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("loss became {loss} at iteration {}", self.iteration + 1)));
        }
        self.model.backward(&grad)?;
        self.sgd.step(&mut self.model)?;
        self.iteration += 1;
        Ok(loss)
    }

    pub fn step(&mut self, data: &SplitTensors) -> Result<f64> {
        let idx = self.batch_indices(data.len(), self.iteration)?;
        let (x, y) = data.batch(&idx);
        self.step_on(&x, &y)
    }
}

/// 1 outside the object, broadcast over bands.
fn loss_mask(inputs: &Tensor, bands: usize) -> Tensor {
    let [n, _, h, w] = inputs.shape();
    let mut m = Tensor::zeros([n, bands, h, w]);
    let p = h * w;
    for i in 0..n {
        let occ = inputs.channel(i, 0);
        for b in 0..bands {
            let dst = &mut m.data_mut()[(i * bands + b) * p..(i * bands + b + 1) * p];
            for (d, &o) in dst.iter_mut().zip(occ) {
                *d = if o > 0.5 { 0.0 } else { 1.0 };
            }
        }
    }
    m
}

/// What a checkpoint records besides tensors.
#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub train: TrainConfig,
    pub resolution: usize,
    pub extent: f64,
    pub bands: BandSet,
    pub clamp_db: (f32, f32),
    pub dataset_hash: String,
    pub best_val_rmse: Option<f64>,
}

impl CheckpointMeta {
    fn to_text(&self) -> String {
        let mut kv = self.train.to_kv();
        // Data is identified by content hash, not location, so a checkpoint
        // doesn't depend on where its dataset lives.
        kv.remove("dataset");
        kv.insert("data.resolution", self.resolution);
        kv.insert("data.extent", format!("{:?}", self.extent));
        let hz: Vec<String> = self.bands.edges_hz().iter().map(|f| format!("{f:?}")).collect();
        kv.insert("data.bands_hz", hz.join(","));
        kv.insert("data.clamp_db", format!("{:?},{:?}", self.clamp_db.0, self.clamp_db.1));
        kv.insert("data.hash", &self.dataset_hash);
        if let Some(r) = self.best_val_rmse {
            kv.insert("best_val_rmse", format!("{r:?}"));
        }
        kv.to_text()
    }

    fn from_text(text: &str) -> Result<Self> {
        let kv = KvMap::parse(text)?;
        let mut train = TrainConfig::desk(PathBuf::new(), 1);
        train.apply_kv(&kv)?;
        let need = |k: &str| kv.get(k).ok_or_else(|| Error::Training(format!("checkpoint lacks {k}")));
        let list = |k: &str| -> Result<Vec<f64>> {
            need(k)?
                .split(',')
                .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad {k}"))))
                .collect()
        };
        let clamp = list("data.clamp_db")?;
        if clamp.len() != 2 {
            return Err(Error::Parse("data.clamp_db needs two values".into()));
        }
        Ok(Self {
            resolution: need("data.resolution")?.parse().map_err(|_| Error::Parse("bad data.resolution".into()))?,
            extent: need("data.extent")?.parse().map_err(|_| Error::Parse("bad data.extent".into()))?,
            bands: BandSet::new(list("data.bands_hz")?.iter().map(|f| std::f64::consts::TAU * f).collect())?,
            clamp_db: (clamp[0] as f32, clamp[1] as f32),
            dataset_hash: need("data.hash")?.to_string(),
            best_val_rmse: kv.get_parsed("best_val_rmse")?,
            train,
        })
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.resolution, self.extent)
    }
}

/// A trained network ready for inference.
pub struct LoadedModel {
    pub model: Frrn,
    pub meta: CheckpointMeta,
    pub iteration: u64,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedModel> {
    let ck = Checkpoint::load(path)?;
    let meta = CheckpointMeta::from_text(&ck.config)?;
    let mut model = Frrn::new(meta.train.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.restore(&mut model)?;
    Ok(LoadedModel { model, meta, iteration: ck.iteration })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub iterations: u64,
    /// `(iteration, loss)` of the iterations run in this call.
    pub losses: Vec<(u64, f64)>,
    /// `(iteration, mean per-band validation RMSE)` at each checkpoint.
    pub validation: Vec<(u64, f64)>,
    pub best_val_rmse: Option<f64>,
    pub wall_time: Duration,
}

/// Trains on `dataset`, writing `latest.ckpt`, `best.ckpt` (lowest mean
/// per-band validation RMSE) and `train_log.txt` to `out_dir`. With
/// `resume`, continues bit-exactly from `latest.ckpt` when present.
pub fn train(config: &TrainConfig, dataset: &Dataset, out_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    config.validate()?;
    let start = Instant::now();
    fs::create_dir_all(out_dir)?;
    let bands = dataset.config.bands.len();
    if config.model.out_channels != bands || config.model.in_channels != 1 {
        return Err(Error::Config(format!(
            "model maps {} -> {} channels; the dataset needs 1 -> {bands}",
            config.model.in_channels, config.model.out_channels
        )));
    }
    let train_data = dataset.tensors(Split::Train)?;
    let val_data = dataset.tensors(Split::Val)?;
    let mut meta = CheckpointMeta {
        train: config.clone(),
        resolution: dataset.config.grid().resolution,
        extent: dataset.config.grid().extent,
        bands: dataset.config.bands.clone(),
        clamp_db: dataset.config.clamp_db,
        dataset_hash: dataset.config.hash(),
        best_val_rmse: None,
    };
    let mut trainer = Trainer::new(config.model.clone(), config.sgd(), config.batch_size, config.seed, config.masked_loss)?;
    let latest = out_dir.join(LATEST_CHECKPOINT);
    let log_path = out_dir.join(TRAIN_LOG);
    if resume && latest.exists() {
        let ck = Checkpoint::load(&latest)?;
        let saved = CheckpointMeta::from_text(&ck.config)?;
        if saved.dataset_hash != meta.dataset_hash || saved.train.model != config.model {
            return Err(Error::Training("checkpoint was trained on another dataset or model".into()));
        }
        ck.restore(&mut trainer.model)?;
        trainer.iteration = ck.iteration;
        trainer.rng = ck.rng.clone();
        meta.best_val_rmse = saved.best_val_rmse;
        truncate_log(&log_path, ck.iteration)?;
        log::info!("resuming from iteration {}", ck.iteration);
    } else {
        fs::write(&log_path, "")?;
    }
    let mut log_file = fs::OpenOptions::new().append(true).open(&log_path)?;
    let mut losses = Vec::new();
    let mut validation = Vec::new();
    let save = |trainer: &Trainer, meta: &CheckpointMeta, path: &Path| -> Result<()> {
        Checkpoint::capture(meta.to_text(), trainer.iteration, &trainer.rng, &trainer.model).save(path)?;
        Ok(())
    };
    while trainer.iteration < config.iterations {
        let loss = trainer.step(&train_data)?;
        let it = trainer.iteration;
        writeln!(log_file, "{it} loss {loss:?}")?;
        log::debug!("iteration {it}: loss {loss:.4}");
        losses.push((it, loss));
        if it % config.checkpoint_every == 0 || it == config.iterations {
            let report = evaluate_tensors(&mut trainer.model, &val_data, meta.clamp_db, &dataset.config.bands, meta.grid()?)?;
            let rmse = report.mean_rmse();
            writeln!(log_file, "{it} val_rmse {rmse:?}")?;
            log::info!("iteration {it}: loss {loss:.4} dB², validation RMSE {rmse:.3} dB");
            validation.push((it, rmse));
            if meta.best_val_rmse.is_none_or(|b| rmse < b) {
                meta.best_val_rmse = Some(rmse);
                save(&trainer, &meta, &out_dir.join(BEST_CHECKPOINT))?;
            }
            save(&trainer, &meta, &latest)?;
        }
    }
    if !latest.exists() {
        save(&trainer, &meta, &latest)?;
    }
    Ok(TrainOutcome {
        iterations: trainer.iteration,
        losses,
        validation,
        best_val_rmse: meta.best_val_rmse,
        wall_time: start.elapsed(),
    })
}

fn truncate_log(path: &Path, iteration: u64) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let kept: String = text
        .lines()
        .filter(|l| l.split_whitespace().next().and_then(|n| n.parse::<u64>().ok()).is_some_and(|n| n <= iteration))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept)?;
    Ok(())
}

/// Accuracy of predicted loudness fields against references.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub resolution: usize,
    pub extent: f64,
    pub band_count: usize,
    pub entries: usize,
    /// Per band, pooled over all pixels of all entries.
    pub rmse: Vec<f64>,
    /// Per band, object-interior pixels excluded.
    pub rmse_masked: Vec<f64>,
    /// Per band, at each pixel the largest absolute error over entries.
    pub maxae_map: Vec<Vec<f32>>,
    pub maxae_map_masked: Vec<Vec<f32>>,
    pub maxae: Vec<f64>,
    pub maxae_masked: Vec<f64>,
    /// Per-entry mean squared error over all bands and pixels.
    pub entry_mse: Vec<f64>,
    /// Mean wall-clock inference time per entry, when measured.
    pub inference_time: Option<Duration>,
}

/// Streaming accumulator behind `EvalReport`.
pub struct EvalAccumulator {
    spec: GridSpec,
    bands: usize,
    sq: Vec<f64>,
    count: Vec<f64>,
    sq_masked: Vec<f64>,
    count_masked: Vec<f64>,
    maxae: Vec<Vec<f32>>,
    maxae_masked: Vec<Vec<f32>>,
    entry_mse: Vec<f64>,
}

impl EvalAccumulator {
    pub fn new(spec: GridSpec, bands: usize) -> Self {
        let n = spec.cell_count();
        Self {
            spec,
            bands,
            sq: vec![0.0; bands],
            count: vec![0.0; bands],
            sq_masked: vec![0.0; bands],
            count_masked: vec![0.0; bands],
            maxae: vec![vec![0.0; n]; bands],
            maxae_masked: vec![vec![0.0; n]; bands],
            entry_mse: Vec::new(),
        }
    }

    /// Adds one entry given band-major predicted and reference values.
    pub fn add(&mut self, predicted: &[f32], reference: &[f32], object: &OccupancyGrid) -> Result<()> {
        let n = self.spec.cell_count();
        if predicted.len() != n * self.bands || reference.len() != n * self.bands || object.spec() != self.spec {
            return Err(Error::Config("prediction, reference and mask sizes disagree".into()));
        }
        let mut entry_sq = 0.0;
        for b in 0..self.bands {
            for p in 0..n {
                let e = (predicted[b * n + p] as f64 - reference[b * n + p] as f64).abs();
                let sq = e * e;
                entry_sq += sq;
                self.sq[b] += sq;
                self.count[b] += 1.0;
                let m = &mut self.maxae[b][p];
                *m = m.max(e as f32);
                if object.cells()[p] == 0 {
                    self.sq_masked[b] += sq;
                    self.count_masked[b] += 1.0;
                    let m = &mut self.maxae_masked[b][p];
                    *m = m.max(e as f32);
                }
            }
        }
        self.entry_mse.push(entry_sq / (n * self.bands) as f64);
        Ok(())
    }

    pub fn finish(self, inference_time: Option<Duration>) -> EvalReport {
        let rms = |sq: &[f64], count: &[f64]| -> Vec<f64> {
            sq.iter().zip(count).map(|(s, c)| if *c > 0.0 { (s / c).sqrt() } else { 0.0 }).collect()
        };
        let peak = |maps: &[Vec<f32>]| -> Vec<f64> {
            maps.iter().map(|m| m.iter().fold(0.0f32, |a, &b| a.max(b)) as f64).collect()
        };
        EvalReport {
            resolution: self.spec.resolution,
            extent: self.spec.extent,
            band_count: self.bands,
            entries: self.entry_mse.len(),
            rmse: rms(&self.sq, &self.count),
            rmse_masked: rms(&self.sq_masked, &self.count_masked),
            maxae: peak(&self.maxae),
            maxae_masked: peak(&self.maxae_masked),
            maxae_map: self.maxae,
            maxae_map_masked: self.maxae_masked,
            entry_mse: self.entry_mse,
            inference_time,
        }
    }
}

impl EvalReport {
    pub fn mean_rmse(&self) -> f64 {
        self.rmse.iter().sum::<f64>() / self.rmse.len().max(1) as f64
    }

    pub fn spec(&self) -> GridSpec {
        GridSpec { resolution: self.resolution, extent: self.extent }
    }

    /// Mean of a band's MaxAE map over the shadow half-plane (x > 0, away
    /// from the source) and the insonified half-plane (x < 0).
    pub fn maxae_half_plane_means(&self, band: usize) -> (f64, f64) {
        half_plane_means(&self.maxae_map[band], self.spec())
    }

    /// Everything except timing, for reproducibility comparisons.
    pub fn metrics_kv(&self) -> KvMap {
        let mut kv = KvMap::new();
        kv.insert("resolution", self.resolution);
        kv.insert("bands", self.band_count);
        kv.insert("entries", self.entries);
        for b in 0..self.band_count {
            kv.insert(format!("band{b}.rmse_db"), format!("{:?}", self.rmse[b]));
            kv.insert(format!("band{b}.rmse_masked_db"), format!("{:?}", self.rmse_masked[b]));
            kv.insert(format!("band{b}.maxae_db"), format!("{:?}", self.maxae[b]));
            kv.insert(format!("band{b}.maxae_masked_db"), format!("{:?}", self.maxae_masked[b]));
            let (shadow, lit) = self.maxae_half_plane_means(b);
            kv.insert(format!("band{b}.maxae_mean_shadow_db"), format!("{shadow:?}"));
            kv.insert(format!("band{b}.maxae_mean_lit_db"), format!("{lit:?}"));
        }
        let per_entry = self.entry_mse.iter().map(|m| m.sqrt()).sum::<f64>() / self.entries.max(1) as f64;
        kv.insert("mean_rmse_db", format!("{:?}", self.mean_rmse()));
        kv.insert("per_entry_mean_rmse_db", format!("{per_entry:?}"));
        kv
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = self.metrics_kv();
        if let Some(t) = self.inference_time {
            kv.insert("inference_seconds_per_entry", format!("{:e}", t.as_secs_f64()));
        }
        kv
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} entries at {}x{}", self.entries, self.resolution, self.resolution);
        let _ = writeln!(s, "band   RMSE dB  (masked)   MaxAE dB  (masked)   MaxAE mean shadow / lit");
        for b in 0..self.band_count {
            let (shadow, lit) = self.maxae_half_plane_means(b);
            let _ = writeln!(
                s,
                "{b:>4}  {:>8.3}  {:>8.3}   {:>8.3}  {:>8.3}   {shadow:>8.3} / {lit:.3}",
                self.rmse[b], self.rmse_masked[b], self.maxae[b], self.maxae_masked[b]
            );
        }
        let per_entry = self.entry_mse.iter().map(|m| m.sqrt()).sum::<f64>() / self.entries.max(1) as f64;
        let _ = writeln!(s, "pooled mean RMSE {:.3} dB; mean of per-entry RMSE {per_entry:.3} dB", self.mean_rmse());
        if let Some(t) = self.inference_time {
            let _ = writeln!(s, "inference {:.3} ms per entry", t.as_secs_f64() * 1e3);
        }
        s
    }
}

pub fn half_plane_means(map: &[f32], spec: GridSpec) -> (f64, f64) {
    let (mut shadow, mut ns, mut lit, mut nl) = (0.0, 0usize, 0.0, 0usize);
    for row in 0..spec.resolution {
        for col in 0..spec.resolution {
            let v = map[row * spec.resolution + col] as f64;
            if spec.cell_center(col, row).x > 0.0 {
                shadow += v;
                ns += 1;
            } else {
                lit += v;
                nl += 1;
            }
        }
    }
    (shadow / ns.max(1) as f64, lit / nl.max(1) as f64)
}

/// Eval-mode predictions for a batch of occupancy images, clamped.
pub fn predict_tensor(model: &mut Frrn, inputs: &Tensor, clamp_db: (f32, f32)) -> Result<Tensor> {
    let mut out = model.predict(inputs)?;
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(clamp_db.0, clamp_db.1));
    Ok(out)
}

pub fn evaluate_tensors(
    model: &mut Frrn,
    data: &SplitTensors,
    clamp_db: (f32, f32),
    bands: &BandSet,
    spec: GridSpec,
) -> Result<EvalReport> {
    let [_, _, h, w] = data.inputs.shape();
    if h != spec.resolution || w != spec.resolution {
        return Err(Error::Config(format!("model grid {} differs from data {h}x{w}", spec.resolution)));
    }
    let mut acc = EvalAccumulator::new(spec, bands.len());
    let mut elapsed = Duration::ZERO;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk);
        let t = Instant::now();
        let pred = predict_tensor(model, &x, clamp_db)?;
        elapsed += t.elapsed();
        for i in 0..chunk.len() {
            let mask = OccupancyGrid::from_cells(spec, x.sample(i).iter().map(|&v| (v > 0.5) as u8).collect())?;
            acc.add(pred.sample(i), y.sample(i), &mask)?;
        }
    }
    Ok(acc.finish(Some(elapsed / data.len().max(1) as u32)))
}

/// Evaluates a checkpoint on one split of a dataset.
pub fn evaluate(loaded: &mut LoadedModel, dataset: &Dataset, split: Split) -> Result<EvalReport> {
    check_compatible(&loaded.meta, &dataset.config)?;
    let data = dataset.tensors(split)?;
    evaluate_tensors(&mut loaded.model, &data, loaded.meta.clamp_db, &dataset.config.bands, loaded.meta.grid()?)
}

fn check_compatible(meta: &CheckpointMeta, config: &DatasetConfig) -> Result<()> {
    if meta.resolution != config.grid().resolution || meta.bands.len() != config.bands.len() {
        return Err(Error::Config(format!(
            "checkpoint is for {}x{} with {} bands; dataset is {}x{} with {}",
            meta.resolution,
            meta.resolution,
            meta.bands.len(),
            config.grid().resolution,
            config.grid().resolution,
            config.bands.len()
        )));
    }
    Ok(())
}

/// Predicts one loudness field; also returns the inference wall-clock.
pub fn predict(loaded: &mut LoadedModel, occupancy: &OccupancyGrid) -> Result<(LoudnessField, Duration)> {
    let spec = loaded.meta.grid()?;
    if occupancy.resolution() != spec.resolution {
        return Err(Error::Config(format!(
            "occupancy is {0}x{0}; the model expects {1}x{1}",
            occupancy.resolution(),
            spec.resolution
        )));
    }
    let x = Tensor::from_vec(
        [1, 1, spec.resolution, spec.resolution],
        occupancy.cells().iter().map(|&c| c as f32).collect(),
    )?;
    let start = Instant::now();
    let out = predict_tensor(&mut loaded.model, &x, loaded.meta.clamp_db)?;
    let elapsed = start.elapsed();
    let field = LoudnessField {
        spec,
        bands: loaded.meta.bands.clone(),
        values: out.into_vec(),
        object_mask: OccupancyGrid::from_cells(spec, occupancy.cells().to_vec())?,
        clamp_db: loaded.meta.clamp_db,
    };
    Ok((field, elapsed))
}

#[derive(Debug, Clone)]
pub struct ShapeResult {
    pub shape: CanonicalShape,
    pub reference: LoudnessField,
    pub prediction: LoudnessField,
    pub rmse: Vec<f64>,
    /// Mean |L(x, y) - L(x, -y)| of the prediction over the region in front
    /// of the object (x < -1 m), per band.
    pub front_asymmetry: Vec<f64>,
}

/// Simulated references and predictions for the four canonical shapes.
pub fn generalization_suite(
    loaded: &mut LoadedModel,
    dataset: &DatasetConfig,
    cache_dir: Option<&Path>,
) -> Result<Vec<ShapeResult>> {
    check_compatible(&loaded.meta, dataset)?;
    let mut out = Vec::new();
    for shape in CanonicalShape::ALL {
        let occ = rasterize(&canonical_shape(shape), dataset.grid())?;
        let mut reference = encode_entry_cached(&occ, &dataset.medium, &dataset.sim, &dataset.bands, cache_dir)?.loudness;
        let (lo, hi) = dataset.clamp_db;
        reference.values.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
        reference.clamp_db = dataset.clamp_db;
        let (prediction, _) = predict(loaded, &occ)?;
        let mut acc = EvalAccumulator::new(dataset.grid(), dataset.bands.len());
        acc.add(&prediction.values, &reference.values, &occ)?;
        let rmse = acc.finish(None).rmse;
        let front_asymmetry = (0..dataset.bands.len()).map(|b| front_asymmetry(&prediction, b, -1.0)).collect();
        out.push(ShapeResult { shape, reference, prediction, rmse, front_asymmetry });
    }
    Ok(out)
}

/// Mean absolute difference between mirrored rows over pixels with x below
/// `x_max`.
pub fn front_asymmetry(field: &LoudnessField, band: usize, x_max: f64) -> f64 {
    let r = field.spec.resolution;
    let (mut sum, mut n) = (0.0, 0usize);
    for row in 0..r {
        for col in 0..r {
            if field.spec.cell_center(col, row).x < x_max {
                sum += (field.at(band, col, row) as f64 - field.at(band, col, r - 1 - row) as f64).abs();
                n += 1;
            }
        }
    }
    sum / n.max(1) as f64
}
