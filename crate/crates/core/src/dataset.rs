//! Train/validation/test datasets of (occupancy, loudness) pairs.
//!
//! Building happens in two phases. Planning draws every scatterer
//! sequentially from per-entry seeds and regenerates shapes whose raster is
//! empty or exactly matches an earlier split (validation against training,
//! test against both). Simulation then fills one shard file per
//! (vertex count, split), shards running in parallel; every shard is
//! written sequentially, so its bytes do not depend on the worker count.
//!
//! Shard layout (little-endian): a 64-byte header
//!
//! | offset | field                                   |
//! |--------|-----------------------------------------|
//! | 0      | magic `SCATSHRD`                        |
//! | 8      | version u32                             |
//! | 12     | resolution u32                          |
//! | 16     | band count u32                          |
//! | 20     | entry count u32                         |
//! | 24     | clamp low f32, clamp high f32           |
//! | 32     | extent f64 (meters)                     |
//! | 40     | vertex count u32                        |
//! | 44     | split u8, 3 bytes padding               |
//! | 48     | first 16 bytes of the dataset hash      |
//!
//! followed by records: `u64` byte length of the rest of the record, `u32`
//! vertex count, `u32` index, occupancy as LSB-first packed bits, loudness as
//! f32 channels-last, and a `u32`-length-prefixed UTF-8 key-value
//! provenance text.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::hash::{DefaultHasher, Hash, Hasher};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use scatter_nn::Tensor;
use sha2::{Digest, Sha256};

use crate::encoder::{encode_entry, BandSet, LoudnessField, DEFAULT_CLAMP_DB};
use crate::error::{Error, Result};
use crate::geometry::{rasterize, sample_random_object_with, GridSpec, OccupancyGrid, MAX_VERTICES, MIN_VERTICES};
use crate::kv::KvMap;
use crate::solver::{config_hash, free_field_reference, MediumParams, SimConfig};

const SHARD_MAGIC: &[u8; 8] = b"SCATSHRD";
const SHARD_VERSION: u32 = 1;
const HEADER_LEN: usize = 64;
pub const MANIFEST_FILE: &str = "manifest.txt";
/// Redraw limit for one entry before the build gives up.
const MAX_ATTEMPTS: u32 = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn code(self) -> u8 {
        self as u8
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Parse(format!("unknown split {s:?} (train, val, test)"))),
        }
    }
}

/// Entries per vertex count in each split.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub const DESK: SplitSizes = SplitSizes { train: 50, val: 5, test: 5 };

    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub sizes: SplitSizes,
    pub medium: MediumParams,
    pub sim: SimConfig,
    pub bands: BandSet,
    pub seed: u64,
    pub min_vertices: usize,
    pub max_vertices: usize,
    pub clamp_db: (f32, f32),
}

impl DatasetConfig {
    /// 900/90/90 entries on the desk grid, two octave bands.
    pub fn desk(seed: u64) -> Self {
        let medium = MediumParams::default();
        Self {
            sizes: SplitSizes::DESK,
            sim: SimConfig::desk(&medium),
            medium,
            bands: BandSet::octaves(2).expect("two octaves"),
            seed,
            min_vertices: MIN_VERTICES,
            max_vertices: MAX_VERTICES,
            clamp_db: DEFAULT_CLAMP_DB,
        }
    }

    pub fn grid(&self) -> GridSpec {
        self.sim.slice
    }

    pub fn vertex_counts(&self) -> std::ops::RangeInclusive<usize> {
        self.min_vertices..=self.max_vertices
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.train == 0 || self.sizes.val == 0 || self.sizes.test == 0 {
            return Err(Error::Config("every split needs at least one entry per vertex count".into()));
        }
        if self.min_vertices < MIN_VERTICES || self.max_vertices > MAX_VERTICES || self.min_vertices > self.max_vertices {
            return Err(Error::Config(format!(
                "vertex range {}..={} outside {MIN_VERTICES}..={MAX_VERTICES}",
                self.min_vertices, self.max_vertices
            )));
        }
        if !(self.clamp_db.0 < self.clamp_db.1) {
            return Err(Error::Config("clamp range must be increasing".into()));
        }
        self.sim.validate(&self.medium, &self.bands)
    }

    /// Everything that determines the dataset bytes.
    pub fn to_kv(&self) -> KvMap {
        let mut kv = self.sim.to_kv();
        kv.insert("c", format!("{:?}", self.medium.c));
        kv.insert("reflectivity", format!("{:?}", self.medium.reflectivity));
        kv.insert("bands_hz", format_list(&self.bands.edges_hz()));
        kv.insert("seed", self.seed);
        kv.insert("k_train", self.sizes.train);
        kv.insert("k_val", self.sizes.val);
        kv.insert("k_test", self.sizes.test);
        kv.insert("min_vertices", self.min_vertices);
        kv.insert("max_vertices", self.max_vertices);
        kv.insert("clamp_db", format!("{:?},{:?}", self.clamp_db.0, self.clamp_db.1));
        kv.insert("solver_hash", config_hash(&self.medium, &self.sim, &self.bands));
        kv.insert("format_version", SHARD_VERSION);
        kv
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_kv().to_text().as_bytes()))
    }

    /// Inverse of `to_kv`, for reopening a built dataset.
    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        let need = |k: &str| kv.get(k).ok_or_else(|| Error::Dataset(format!("manifest lacks {k}")));
        let parse_f64 = |k: &str| need(k)?.parse::<f64>().map_err(|_| Error::Dataset(format!("bad {k} in manifest")));
        let parse_usize =
            |k: &str| need(k)?.parse::<usize>().map_err(|_| Error::Dataset(format!("bad {k} in manifest")));
        let medium = MediumParams { c: parse_f64("c")?, reflectivity: parse_f64("reflectivity")? };
        let slice = GridSpec::new(parse_usize("resolution")?, parse_f64("extent")?)?;
        let mut sim = SimConfig::with_slice(slice, parse_f64("max_frequency")?, &medium);
        sim.apply_kv(kv, &medium)?;
        let edges = parse_list(need("bands_hz")?)?;
        let bands = BandSet::new(edges.iter().map(|f| std::f64::consts::TAU * f).collect())?;
        let clamp = parse_list(need("clamp_db")?)?;
        if clamp.len() != 2 {
            return Err(Error::Dataset("clamp_db needs two values".into()));
        }
        let cfg = Self {
            sizes: SplitSizes { train: parse_usize("k_train")?, val: parse_usize("k_val")?, test: parse_usize("k_test")? },
            medium,
            sim,
            bands,
            seed: need("seed")?.parse().map_err(|_| Error::Dataset("bad seed in manifest".into()))?,
            min_vertices: parse_usize("min_vertices")?,
            max_vertices: parse_usize("max_vertices")?,
            clamp_db: (clamp[0] as f32, clamp[1] as f32),
        };
        Ok(cfg)
    }
}

impl DatasetConfig {
    /// Applies user-supplied keys on top of this configuration. `bands` is
    /// an octave count from 125 Hz, `bands_hz` explicit edges; the solver's
    /// maximum frequency follows the top band edge unless given.
    pub fn apply_overrides(&mut self, kv: &KvMap) -> Result<()> {
        if let Some(c) = kv.get_parsed::<f64>("c")? {
            self.medium.c = c;
        }
        if let Some(r) = kv.get_parsed::<f64>("reflectivity")? {
            self.medium.reflectivity = r;
        }
        if let Some(n) = kv.get_parsed::<usize>("bands")? {
            self.bands = BandSet::octaves(n)?;
        }
        if let Some(edges) = kv.get("bands_hz") {
            self.bands = BandSet::new(parse_list(edges)?.iter().map(|f| std::f64::consts::TAU * f).collect())?;
        }
        let mut sim_kv = kv.clone();
        let top_hz = *self.bands.edges_hz().last().expect("bands are non-empty");
        if sim_kv.get("max_frequency").is_none() && (top_hz / self.sim.max_frequency - 1.0).abs() > 1e-9 {
            sim_kv.insert("max_frequency", format!("{top_hz:?}"));
        }
        let medium_changed = kv.get("c").is_some();
        if medium_changed && sim_kv.get("resolution").is_none() {
            sim_kv.insert("resolution", self.sim.slice.resolution);
        }
        self.sim.apply_kv(&sim_kv, &self.medium)?;
        macro_rules! field {
            ($key:literal, $target:expr) => {
                if let Some(v) = kv.get_parsed($key)? {
                    $target = v;
                }
            };
        }
        field!("seed", self.seed);
        field!("k_train", self.sizes.train);
        field!("k_val", self.sizes.val);
        field!("k_test", self.sizes.test);
        field!("min_vertices", self.min_vertices);
        field!("max_vertices", self.max_vertices);
        if let Some(c) = kv.get("clamp_db") {
            let c = parse_list(c)?;
            if c.len() != 2 {
                return Err(Error::Config("clamp_db needs two values".into()));
            }
            self.clamp_db = (c[0] as f32, c[1] as f32);
        }
        self.validate()
    }
}

fn format_list(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

fn parse_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| Error::Parse(format!("bad number {s:?}"))))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EntryKey {
    pub split: Split,
    pub n_vertices: usize,
    pub index: usize,
}

/// Seed of one drawing attempt, derived from the master seed and the
/// entry's coordinates so streams never overlap.
pub fn entry_seed(master: u64, key: EntryKey, attempt: u32) -> u64 {
    let text = format!("{master}/{}/{}/{}/{attempt}", key.split, key.n_vertices, key.index);
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// One drawn scatterer.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub occupancy: OccupancyGrid,
    pub provenance: KvMap,
}

/// The default random draw for `key`.
pub fn draw_candidate(config: &DatasetConfig, key: EntryKey, attempt: u32) -> Result<Candidate> {
    let seed = entry_seed(config.seed, key, attempt);
    let object = sample_random_object_with(key.n_vertices, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let occupancy = rasterize(&object.polygon, config.grid())?;
    let vertices: Vec<String> =
        object.polygon.vertices().iter().map(|p| format!("{:?} {:?}", p.x, p.y)).collect();
    let mut provenance = KvMap::new();
    provenance.insert("seed", seed);
    provenance.insert("attempt", attempt);
    provenance.insert("rotation", format!("{:?}", object.rotation));
    provenance.insert("scale_x", format!("{:?}", object.scale_x));
    provenance.insert("scale_y", format!("{:?}", object.scale_y));
    provenance.insert("vertices", vertices.join(";"));
    Ok(Candidate { occupancy, provenance })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exclusion {
    pub key: EntryKey,
    pub attempt: u32,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct PlannedEntry {
    pub key: EntryKey,
    pub candidate: Candidate,
}

#[derive(Debug, Clone)]
pub struct DatasetPlan {
    pub entries: Vec<PlannedEntry>,
    pub exclusions: Vec<Exclusion>,
}

impl DatasetPlan {
    fn shard(&self, split: Split, n: usize) -> Vec<&PlannedEntry> {
        self.entries.iter().filter(|e| e.key.split == split && e.key.n_vertices == n).collect()
    }
}

fn grid_hash(g: &OccupancyGrid) -> u64 {
    let mut h = DefaultHasher::new();
    g.hash(&mut h);
    h.finish()
}

/// Exact-match lookup: hash buckets verified by full comparison.
#[derive(Default)]
struct GridIndex {
    buckets: HashMap<u64, Vec<OccupancyGrid>>,
}

impl GridIndex {
    fn contains(&self, g: &OccupancyGrid) -> bool {
        self.buckets.get(&grid_hash(g)).is_some_and(|b| b.iter().any(|x| x == g))
    }

    fn insert(&mut self, g: OccupancyGrid) {
        self.buckets.entry(grid_hash(&g)).or_default().push(g);
    }
}

/// Plans every entry with the default random draw.
pub fn plan_dataset(config: &DatasetConfig) -> Result<DatasetPlan> {
    plan_dataset_with(config, &mut |key, attempt| draw_candidate(config, key, attempt))
}

/// Plans with a caller-supplied draw (used to inject known shapes).
pub fn plan_dataset_with(
    config: &DatasetConfig,
    draw: &mut dyn FnMut(EntryKey, u32) -> Result<Candidate>,
) -> Result<DatasetPlan> {
    config.validate()?;
    let mut entries = Vec::new();
    let mut exclusions = Vec::new();
    let mut earlier = GridIndex::default();
    for split in Split::ALL {
        let mut this_split = Vec::new();
        for n in config.vertex_counts() {
            for index in 0..config.sizes.get(split) {
                let key = EntryKey { split, n_vertices: n, index };
                let mut attempt = 0;
                let candidate = loop {
                    if attempt >= MAX_ATTEMPTS {
                        return Err(Error::Dataset(format!("no admissible shape for {key:?}")));
                    }
                    let c = draw(key, attempt)?;
                    let reason = if c.occupancy.is_vacant() {
                        Some("empty raster".to_string())
                    } else if split != Split::Train && earlier.contains(&c.occupancy) {
                        Some("exact match in an earlier split".to_string())
                    } else {
                        None
                    };
                    match reason {
                        Some(reason) => {
                            log::info!("excluding {split} n={n} #{index} attempt {attempt}: {reason}");
                            exclusions.push(Exclusion { key, attempt, reason });
                            attempt += 1;
                        }
                        None => break c,
                    }
                };
                this_split.push(candidate.occupancy.clone());
                entries.push(PlannedEntry { key, candidate });
            }
        }
        for g in this_split {
            earlier.insert(g);
        }
    }
    Ok(DatasetPlan { entries, exclusions })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEntry {
    pub key: EntryKey,
    pub input: OccupancyGrid,
    pub target: LoudnessField,
    pub provenance: KvMap,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShardHeader {
    pub resolution: usize,
    pub band_count: usize,
    pub entry_count: usize,
    pub clamp_db: (f32, f32),
    pub extent: f64,
    pub n_vertices: usize,
    pub split: Split,
    pub dataset_hash: [u8; 16],
}

impl ShardHeader {
    fn to_bytes(self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[..8].copy_from_slice(SHARD_MAGIC);
        b[8..12].copy_from_slice(&SHARD_VERSION.to_le_bytes());
        b[12..16].copy_from_slice(&(self.resolution as u32).to_le_bytes());
        b[16..20].copy_from_slice(&(self.band_count as u32).to_le_bytes());
        b[20..24].copy_from_slice(&(self.entry_count as u32).to_le_bytes());
        b[24..28].copy_from_slice(&self.clamp_db.0.to_le_bytes());
        b[28..32].copy_from_slice(&self.clamp_db.1.to_le_bytes());
        b[32..40].copy_from_slice(&self.extent.to_le_bytes());
        b[40..44].copy_from_slice(&(self.n_vertices as u32).to_le_bytes());
        b[44] = self.split.code();
        b[48..64].copy_from_slice(&self.dataset_hash);
        b
    }

    fn from_bytes(b: &[u8]) -> Result<Self> {
        if b.len() < HEADER_LEN || &b[..8] != SHARD_MAGIC {
            return Err(Error::Dataset("not a shard file".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap()) as usize;
        let f32_at = |o: usize| f32::from_le_bytes(b[o..o + 4].try_into().unwrap());
        if u32_at(8) != SHARD_VERSION as usize {
            return Err(Error::Dataset(format!("unsupported shard version {}", u32_at(8))));
        }
        let split = match b[44] {
            0 => Split::Train,
            1 => Split::Val,
            2 => Split::Test,
            s => return Err(Error::Dataset(format!("bad split code {s}"))),
        };
        Ok(Self {
            resolution: u32_at(12),
            band_count: u32_at(16),
            entry_count: u32_at(20),
            clamp_db: (f32_at(24), f32_at(28)),
            extent: f64::from_le_bytes(b[32..40].try_into().unwrap()),
            n_vertices: u32_at(40),
            split,
            dataset_hash: b[48..64].try_into().unwrap(),
        })
    }

    fn spec(&self) -> Result<GridSpec> {
        GridSpec::new(self.resolution, self.extent)
    }
}

pub fn shard_file_name(split: Split, n_vertices: usize) -> String {
    format!("{split}_n{n_vertices:02}.shard")
}

fn encode_record(entry: &DatasetEntry) -> Vec<u8> {
    let prov = entry.provenance.to_text();
    let bits = entry.input.to_packed_bits();
    let values = entry.target.to_channels_last();
    let len = 8 + bits.len() + 4 * values.len() + 4 + prov.len();
    let mut b = Vec::with_capacity(8 + len);
    b.extend_from_slice(&(len as u64).to_le_bytes());
    b.extend_from_slice(&(entry.key.n_vertices as u32).to_le_bytes());
    b.extend_from_slice(&(entry.key.index as u32).to_le_bytes());
    b.extend_from_slice(&bits);
    for v in values {
        b.extend_from_slice(&v.to_le_bytes());
    }
    b.extend_from_slice(&(prov.len() as u32).to_le_bytes());
    b.extend_from_slice(prov.as_bytes());
    b
}

/// Parses one record body; `None` if it is malformed.
fn decode_record(header: &ShardHeader, bands: &BandSet, body: &[u8]) -> Result<Option<DatasetEntry>> {
    let spec = header.spec()?;
    let cells = spec.cell_count();
    let bits_len = cells.div_ceil(8);
    let values_len = 4 * cells * header.band_count;
    if body.len() < 8 + bits_len + values_len + 4 {
        return Ok(None);
    }
    let n_vertices = u32::from_le_bytes(body[0..4].try_into().unwrap()) as usize;
    let index = u32::from_le_bytes(body[4..8].try_into().unwrap()) as usize;
    let mut o = 8;
    let input = OccupancyGrid::from_packed_bits(spec, &body[o..o + bits_len])?;
    o += bits_len;
    let values: Vec<f32> =
        body[o..o + values_len].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    o += values_len;
    let prov_len = u32::from_le_bytes(body[o..o + 4].try_into().unwrap()) as usize;
    o += 4;
    if body.len() != o + prov_len || n_vertices != header.n_vertices {
        return Ok(None);
    }
    let Ok(text) = std::str::from_utf8(&body[o..]) else { return Ok(None) };
    let provenance = KvMap::parse(text)?;
    let target = LoudnessField::from_channels_last(spec, bands.clone(), &values, input.clone(), header.clamp_db)?;
    Ok(Some(DatasetEntry { key: EntryKey { split: header.split, n_vertices, index }, input, target, provenance }))
}

/// Reads the complete records of a shard; the byte offset after the last
/// complete record is returned alongside so a partial tail can be cut.
fn read_records(path: &Path, bands: &BandSet) -> Result<(ShardHeader, Vec<DatasetEntry>, u64)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let header = ShardHeader::from_bytes(&bytes)?;
    if header.band_count != bands.len() {
        return Err(Error::Dataset(format!("{}: band count {} differs", path.display(), header.band_count)));
    }
    let mut entries = Vec::new();
    let mut o = HEADER_LEN;
    while o + 8 <= bytes.len() {
        let len = u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize;
        if len > bytes.len() - o - 8 {
            break;
        }
        match decode_record(&header, bands, &bytes[o + 8..o + 8 + len])? {
            Some(e) if e.key.index == entries.len() => entries.push(e),
            _ => break,
        }
        o += 8 + len;
    }
    Ok((header, entries, o as u64))
}

/// A shard's complete contents; errors if it holds fewer entries than its
/// header promises.
pub fn read_shard(path: &Path, bands: &BandSet) -> Result<(ShardHeader, Vec<DatasetEntry>)> {
    let (header, entries, end) = read_records(path, bands)?;
    let size = fs::metadata(path)?.len();
    if entries.len() != header.entry_count || end != size {
        return Err(Error::Dataset(format!(
            "{}: {} of {} entries readable ({} trailing bytes)",
            path.display(),
            entries.len(),
            header.entry_count,
            size - end
        )));
    }
    Ok((header, entries))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DedupReport {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// `(split, n_vertices, index)` of every val/test entry that exactly
    /// matches an entry of an earlier split.
    pub collisions: Vec<EntryKey>,
}

impl DedupReport {
    pub fn is_disjoint(&self) -> bool {
        self.collisions.is_empty()
    }
}

/// Exhaustive hash-then-verify disjointness check between splits.
pub fn verify_disjoint<'a>(entries: impl IntoIterator<Item = &'a DatasetEntry>) -> DedupReport {
    let mut by_split: BTreeMap<Split, Vec<&DatasetEntry>> = BTreeMap::new();
    for e in entries {
        by_split.entry(e.key.split).or_default().push(e);
    }
    let mut report = DedupReport::default();
    let mut earlier = GridIndex::default();
    for split in Split::ALL {
        let list = by_split.remove(&split).unwrap_or_default();
        match split {
            Split::Train => report.train = list.len(),
            Split::Val => report.val = list.len(),
            Split::Test => report.test = list.len(),
        }
        if split != Split::Train {
            report.collisions.extend(list.iter().filter(|e| earlier.contains(&e.input)).map(|e| e.key));
        }
        for e in list {
            earlier.insert(e.input.clone());
        }
    }
    report
}

#[derive(Debug, Clone)]
pub struct SplitManifest {
    pub config: DatasetConfig,
    pub counts: BTreeMap<(Split, usize), usize>,
    pub exclusions: Vec<Exclusion>,
    pub dedup: DedupReport,
}

impl SplitManifest {
    pub fn total(&self, split: Split) -> usize {
        self.counts.iter().filter(|((s, _), _)| *s == split).map(|(_, c)| c).sum()
    }

    pub fn to_kv(&self) -> KvMap {
        let mut kv = self.config.to_kv();
        kv.insert("dataset_hash", self.config.hash());
        for ((split, n), c) in &self.counts {
            kv.insert(format!("count.{split}.n{n:02}"), c);
        }
        for split in Split::ALL {
            kv.insert(format!("total.{split}"), self.total(split));
        }
        kv.insert("excluded", self.exclusions.len());
        for (i, e) in self.exclusions.iter().enumerate() {
            kv.insert(
                format!("excluded.{i:05}"),
                format!("{} n={} index={} attempt={}: {}", e.key.split, e.key.n_vertices, e.key.index, e.attempt, e.reason),
            );
        }
        kv.insert("dedup.collisions", self.dedup.collisions.len());
        kv.insert("dedup.disjoint", self.dedup.is_disjoint());
        kv
    }
}

fn write_shard_entries(
    path: &Path,
    header: ShardHeader,
    planned: &[&PlannedEntry],
    bands: &BandSet,
    mut produce: impl FnMut(&PlannedEntry) -> Result<DatasetEntry>,
) -> Result<()> {
    let mut resume_at = 0;
    let mut file = None;
    if path.exists() {
        match read_records(path, bands) {
            Ok((h, done, end)) if h == header && done.iter().zip(planned).all(|(d, p)| d.input == p.candidate.occupancy) => {
                if done.len() > planned.len() {
                    return Err(Error::Dataset(format!("{}: more entries than planned", path.display())));
                }
                let f = OpenOptions::new().write(true).open(path)?;
                f.set_len(end)?;
                resume_at = done.len();
                if resume_at > 0 {
                    log::info!("{}: resuming after {resume_at} entries", path.display());
                }
                file = Some(f);
            }
            _ => log::warn!("{}: unusable shard, rebuilding", path.display()),
        }
    }
    let mut file = match file {
        Some(f) => f,
        None => {
            let mut f = File::create(path)?;
            f.write_all(&header.to_bytes())?;
            f
        }
    };
    file.seek(SeekFrom::End(0))?;
    let mut out = BufWriter::new(file);
    for p in &planned[resume_at..] {
        let entry = produce(p)?;
        out.write_all(&encode_record(&entry))?;
        out.flush()?;
    }
    out.into_inner().map_err(|e| e.into_error())?.sync_all()?;
    Ok(())
}

/// Builds (or resumes) the dataset under `out_dir` and writes the manifest.
/// The free-field reference is cached in `out_dir/cache`.
pub fn build_dataset(config: &DatasetConfig, out_dir: &Path, workers: usize) -> Result<SplitManifest> {
    build_dataset_with(config, out_dir, workers, &mut |key, attempt| draw_candidate(config, key, attempt))
}

pub fn build_dataset_with(
    config: &DatasetConfig,
    out_dir: &Path,
    workers: usize,
    draw: &mut dyn FnMut(EntryKey, u32) -> Result<Candidate>,
) -> Result<SplitManifest> {
    let plan = plan_dataset_with(config, draw)?;
    fs::create_dir_all(out_dir)?;
    let free = free_field_reference(&config.medium, &config.sim, &config.bands, Some(&out_dir.join("cache")))?;
    let hash = config.hash();
    let hash_prefix: [u8; 16] = hex::decode(&hash).expect("hex digest")[..16].try_into().unwrap();
    let shards: Vec<(Split, usize)> =
        Split::ALL.iter().flat_map(|&s| config.vertex_counts().map(move |n| (s, n))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let solver_hash = config_hash(&config.medium, &config.sim, &config.bands);
    pool.install(|| {
        shards.par_iter().try_for_each(|&(split, n)| {
            let planned = plan.shard(split, n);
            let header = ShardHeader {
                resolution: config.grid().resolution,
                band_count: config.bands.len(),
                entry_count: planned.len(),
                clamp_db: config.clamp_db,
                extent: config.grid().extent,
                n_vertices: n,
                split,
                dataset_hash: hash_prefix,
            };
            let path = out_dir.join(shard_file_name(split, n));
            write_shard_entries(&path, header, &planned, &config.bands, |p| {
                let run = encode_entry(&p.candidate.occupancy, &config.medium, &config.sim, &config.bands, &free)?;
                let mut target = run.loudness;
                if target.clamp_db != config.clamp_db {
                    let (lo, hi) = config.clamp_db;
                    target.values.iter_mut().for_each(|v| *v = v.clamp(lo, hi));
                    target.clamp_db = config.clamp_db;
                }
                let mut provenance = p.candidate.provenance.clone();
                provenance.insert("solver_hash", &solver_hash);
                provenance.insert("steps", run.stats.steps);
                provenance.insert("trailing_energy_ratio", format!("{:e}", run.stats.trailing_energy_ratio));
                provenance.insert("max_abs_pressure", format!("{:e}", run.stats.max_abs_pressure));
                Ok(DatasetEntry { key: p.key, input: p.candidate.occupancy.clone(), target, provenance })
            })
        })
    })?;
    let dataset = Dataset::open_with(out_dir, config.clone())?;
    let dedup = verify_disjoint(dataset.entries());
    if !dedup.is_disjoint() {
        return Err(Error::Dataset(format!("{} entries duplicate an earlier split", dedup.collisions.len())));
    }
    let manifest = SplitManifest { config: config.clone(), counts: dataset.counts(), exclusions: plan.exclusions, dedup };
    let tmp = out_dir.join("manifest.tmp");
    fs::write(&tmp, manifest.to_kv().to_text())?;
    fs::rename(&tmp, out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

const FIELD_MAGIC: &[u8; 8] = b"SCATFELD";

/// Writes one loudness field with its occupancy and provenance:
/// magic, u32 header length, key-value header, packed occupancy bits,
/// band-major f32 values (all little-endian).
pub fn save_field(path: &Path, field: &LoudnessField, provenance: &KvMap) -> Result<()> {
    let mut header = provenance.clone();
    header.insert("resolution", field.spec.resolution);
    header.insert("extent", format!("{:?}", field.spec.extent));
    header.insert("bands_hz", format_list(&field.bands.edges_hz()));
    header.insert("clamp_db", format!("{:?},{:?}", field.clamp_db.0, field.clamp_db.1));
    let text = header.to_text();
    let mut b = FIELD_MAGIC.to_vec();
    b.extend_from_slice(&(text.len() as u32).to_le_bytes());
    b.extend_from_slice(text.as_bytes());
    b.extend_from_slice(&field.object_mask.to_packed_bits());
    for v in &field.values {
        b.extend_from_slice(&v.to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, b)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Inverse of `save_field`; the header comes back as provenance.
pub fn load_field(path: &Path) -> Result<(LoudnessField, KvMap)> {
    let b = fs::read(path)?;
    let bad = || Error::Dataset(format!("{}: not a field file", path.display()));
    if b.len() < 12 || &b[..8] != FIELD_MAGIC {
        return Err(bad());
    }
    let text_len = u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize;
    let text = b.get(12..12 + text_len).ok_or_else(bad)?;
    let kv = KvMap::parse(std::str::from_utf8(text).map_err(|_| bad())?)?;
    let need = |k: &str| kv.get(k).ok_or_else(bad);
    let spec = GridSpec::new(
        need("resolution")?.parse().map_err(|_| bad())?,
        need("extent")?.parse().map_err(|_| bad())?,
    )?;
    let bands = BandSet::new(parse_list(need("bands_hz")?)?.iter().map(|f| std::f64::consts::TAU * f).collect())?;
    let clamp = parse_list(need("clamp_db")?)?;
    if clamp.len() != 2 {
        return Err(bad());
    }
    let mut o = 12 + text_len;
    let bits_len = spec.cell_count().div_ceil(8);
    let mask = OccupancyGrid::from_packed_bits(spec, b.get(o..o + bits_len).ok_or_else(bad)?)?;
    o += bits_len;
    let values: Vec<f32> = b[o..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    if b.len() - o != 4 * spec.cell_count() * bands.len() {
        return Err(bad());
    }
    let field = LoudnessField { spec, bands, values, object_mask: mask, clamp_db: (clamp[0] as f32, clamp[1] as f32) };
    Ok((field, kv))
}

/// A fully built dataset held in memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub config: DatasetConfig,
    splits: BTreeMap<Split, Vec<DatasetEntry>>,
}

impl Dataset {
    /// Opens a dataset through its manifest.
    pub fn open(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))
            .map_err(|e| Error::Dataset(format!("{}: cannot read manifest: {e}", dir.display())))?;
        let kv = KvMap::parse(&text)?;
        let config = DatasetConfig::from_kv(&kv)?;
        if kv.get("dataset_hash") != Some(config.hash().as_str()) {
            return Err(Error::Dataset("manifest hash does not match its configuration".into()));
        }
        let ds = Self::open_with(dir, config)?;
        for ((split, n), count) in ds.counts() {
            let listed = kv.get_parsed::<usize>(&format!("count.{split}.n{n:02}"))?;
            if listed != Some(count) {
                return Err(Error::Dataset(format!("manifest count for {split} n={n} differs from shard")));
            }
        }
        Ok(ds)
    }

    fn open_with(dir: &Path, config: DatasetConfig) -> Result<Self> {
        let hash = hex::decode(config.hash()).expect("hex digest");
        let mut splits = BTreeMap::new();
        for split in Split::ALL {
            let mut all = Vec::new();
            for n in config.vertex_counts() {
                let (header, entries) = read_shard(&dir.join(shard_file_name(split, n)), &config.bands)?;
                if header.dataset_hash[..] != hash[..16] || header.resolution != config.grid().resolution {
                    return Err(Error::Dataset(format!("shard {split} n={n} belongs to another dataset")));
                }
                if entries.len() != config.sizes.get(split) {
                    return Err(Error::Dataset(format!("shard {split} n={n} has {} entries", entries.len())));
                }
                all.extend(entries);
            }
            splits.insert(split, all);
        }
        Ok(Self { dir: dir.to_path_buf(), config, splits })
    }

    pub fn split(&self, split: Split) -> &[DatasetEntry] {
        self.splits.get(&split).map_or(&[], Vec::as_slice)
    }

    pub fn entries(&self) -> impl Iterator<Item = &DatasetEntry> {
        self.splits.values().flatten()
    }

    pub fn counts(&self) -> BTreeMap<(Split, usize), usize> {
        let mut counts = BTreeMap::new();
        for e in self.entries() {
            *counts.entry((e.key.split, e.key.n_vertices)).or_insert(0) += 1;
        }
        counts
    }

    pub fn tensors(&self, split: Split) -> Result<SplitTensors> {
        SplitTensors::from_entries(self.split(split))
    }
}

/// A split as network-ready tensors: inputs `[n, 1, H, W]` (0/1) and
/// targets `[n, B, H, W]` in dB.
#[derive(Debug, Clone)]
pub struct SplitTensors {
    pub inputs: Tensor,
    pub targets: Tensor,
    pub keys: Vec<EntryKey>,
}

impl SplitTensors {
    pub fn from_entries(entries: &[DatasetEntry]) -> Result<Self> {
        let first = entries.first().ok_or_else(|| Error::Dataset("empty split".into()))?;
        let res = first.input.resolution();
        let bands = first.target.band_count();
        let cells = res * res;
        let mut inputs = Vec::with_capacity(entries.len() * cells);
        let mut targets = Vec::with_capacity(entries.len() * cells * bands);
        for e in entries {
            if e.input.resolution() != res || e.target.band_count() != bands {
                return Err(Error::Dataset("entries differ in resolution or band count".into()));
            }
            inputs.extend(e.input.cells().iter().map(|&c| c as f32));
            targets.extend_from_slice(&e.target.values);
        }
        let n = entries.len();
        Ok(Self {
            inputs: Tensor::from_vec([n, 1, res, res], inputs)?,
            targets: Tensor::from_vec([n, bands, res, res], targets)?,
            keys: entries.iter().map(|e| e.key).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// `(inputs, targets)` for the given entry indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Tensor) {
        (self.inputs.gather(indices), self.targets.gather(indices))
    }

    pub fn iterate_minibatches(
        &self,
        batch_size: usize,
        shuffle_seed: u64,
        epoch: u64,
    ) -> Result<impl Iterator<Item = (Tensor, Tensor)> + '_> {
        let order = minibatch_order(self.len(), batch_size, shuffle_seed, epoch)?;
        Ok(order.into_iter().map(move |idx| self.batch(&idx)))
    }
}

/// Entry indices of every minibatch of one epoch: a permutation determined
/// by `(shuffle_seed, epoch)`, chunked, the final short batch kept.
pub fn minibatch_order(count: usize, batch_size: usize, shuffle_seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if count == 0 {
        return Err(Error::Dataset("cannot iterate an empty split".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..count).collect();
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&shuffle_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&epoch.to_le_bytes());
    order.shuffle(&mut ChaCha8Rng::from_seed(seed));
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minibatch_arithmetic_and_partition() {
        let batches = minibatch_order(900, 8, 3, 0).unwrap();
        assert_eq!(batches.len(), 113);
        assert_eq!(batches.last().unwrap().len(), 4);
        assert_eq!(batches, minibatch_order(900, 8, 3, 0).unwrap());
        assert_ne!(batches, minibatch_order(900, 8, 3, 1).unwrap());
        let mut all: Vec<usize> = batches.concat();
        all.sort_unstable();
        assert_eq!(all, (0..900).collect::<Vec<_>>());
        assert!(minibatch_order(0, 8, 0, 0).is_err());
    }

    #[test]
    fn entry_seeds_differ_across_coordinates() {
        let k = EntryKey { split: Split::Train, n_vertices: 3, index: 0 };
        let seeds = [
            entry_seed(1, k, 0),
            entry_seed(1, k, 1),
            entry_seed(2, k, 0),
            entry_seed(1, EntryKey { index: 1, ..k }, 0),
            entry_seed(1, EntryKey { split: Split::Test, ..k }, 0),
            entry_seed(1, EntryKey { n_vertices: 4, ..k }, 0),
        ];
        for i in 0..seeds.len() {
            for j in i + 1..seeds.len() {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
    }

    #[test]
    fn header_round_trip() {
        let h = ShardHeader {
            resolution: 64,
            band_count: 2,
            entry_count: 50,
            clamp_db: (-40.0, 20.0),
            extent: 16.0,
            n_vertices: 7,
            split: Split::Val,
            dataset_hash: [7; 16],
        };
        assert_eq!(ShardHeader::from_bytes(&h.to_bytes()).unwrap(), h);
    }

    #[test]
    fn record_round_trip_is_bit_exact() {
        use crate::geometry::{canonical_shape, CanonicalShape};
        let spec = GridSpec::desk();
        let bands = BandSet::octaves(2).unwrap();
        let input = rasterize(&canonical_shape(CanonicalShape::Circle), spec).unwrap();
        let values: Vec<f32> = (0..spec.cell_count() * 2).map(|i| (i as f32 * 0.37).sin() * 17.0 - 1e-7).collect();
        let target =
            LoudnessField { spec, bands: bands.clone(), values, object_mask: input.clone(), clamp_db: DEFAULT_CLAMP_DB };
        let mut provenance = KvMap::new();
        provenance.insert("note", "ünïcode ok");
        let entry = DatasetEntry { key: EntryKey { split: Split::Test, n_vertices: 9, index: 0 }, input, target, provenance };
        let header = ShardHeader {
            resolution: 64,
            band_count: 2,
            entry_count: 1,
            clamp_db: DEFAULT_CLAMP_DB,
            extent: 16.0,
            n_vertices: 9,
            split: Split::Test,
            dataset_hash: [0; 16],
        };
        let bytes = encode_record(&entry);
        let back = decode_record(&header, &bands, &bytes[8..]).unwrap().unwrap();
        assert_eq!(back, entry);
        assert!(back.target.values.iter().zip(&entry.target.values).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(decode_record(&header, &bands, &bytes[8..bytes.len() - 1]).unwrap().is_none());
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = DatasetConfig::desk(5);
        let back = DatasetConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn plan_excludes_injected_duplicate() {
        let mut cfg = DatasetConfig::desk(1);
        cfg.sizes = SplitSizes { train: 2, val: 1, test: 1 };
        cfg.max_vertices = 4;
        let train_shape = draw_candidate(&cfg, EntryKey { split: Split::Train, n_vertices: 3, index: 0 }, 0).unwrap();
        let plan = plan_dataset_with(&cfg, &mut |key, attempt| {
            if key.split == Split::Test && key.n_vertices == 4 && attempt == 0 {
                Ok(train_shape.clone())
            } else {
                draw_candidate(&cfg, key, attempt)
            }
        })
        .unwrap();
        assert_eq!(plan.entries.len(), 2 * 4);
        let dup = plan.exclusions.iter().find(|e| e.key.split == Split::Test).unwrap();
        assert_eq!((dup.key.n_vertices, dup.attempt), (4, 0));
        let test = plan.entries.iter().find(|e| e.key.split == Split::Test && e.key.n_vertices == 4).unwrap();
        assert_eq!(test.candidate.provenance.get("attempt"), Some("1"));
        assert_ne!(test.candidate.occupancy, train_shape.occupancy);
    }

    #[test]
    fn overrides_rederive_solver_settings() {
        let mut cfg = DatasetConfig::desk(0);
        let mut kv = KvMap::new();
        kv.insert("resolution", 32);
        kv.insert("k_train", 2);
        cfg.apply_overrides(&kv).unwrap();
        let medium = MediumParams::default();
        let fresh = SimConfig::with_slice(GridSpec::new(32, 16.0).unwrap(), 500.0, &medium);
        assert_eq!(cfg.sim.to_kv(), fresh.to_kv());
        assert_eq!(cfg.sizes.train, 2);

        let mut kv = KvMap::new();
        kv.insert("bands", 3);
        cfg.apply_overrides(&kv).unwrap();
        assert_eq!(cfg.bands.len(), 3);
        assert_eq!(cfg.sim.max_frequency, 1000.0);
    }

    #[test]
    fn field_file_round_trip() {
        let spec = GridSpec::new(8, 4.0).unwrap();
        let mut mask = OccupancyGrid::empty(spec);
        mask.set(3, 4, true);
        let mut f = LoudnessField::constant(spec, BandSet::octaves(2).unwrap(), 0.0, mask);
        f.values.iter_mut().enumerate().for_each(|(i, v)| *v = i as f32 * 0.25 - 9.0);
        let dir = std::env::temp_dir().join(format!("scatter-field-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("f.bin");
        let mut prov = KvMap::new();
        prov.insert("shape", "square");
        save_field(&path, &f, &prov).unwrap();
        let (back, kv) = load_field(&path).unwrap();
        assert_eq!(back, f);
        assert_eq!(kv.get("shape"), Some("square"));
        fs::remove_dir_all(&dir).unwrap();
    }
}
