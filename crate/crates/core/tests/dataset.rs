use std::fs;
use std::path::Path;

use scatter_core::dataset::*;
use scatter_core::geometry::{GridSpec, Point};
use scatter_core::solver::SimConfig;

/// 4 m slice at 16 px with a small region so each simulation is quick.
fn mini_config(seed: u64) -> DatasetConfig {
    let mut cfg = DatasetConfig::desk(seed);
    cfg.sizes = SplitSizes { train: 2, val: 1, test: 1 };
    cfg.max_vertices = 5;
    let mut sim = SimConfig::with_slice(GridSpec::new(16, 4.0).unwrap(), 500.0, &cfg.medium);
    sim.region_half_x = 4.0;
    sim.region_half_y = 2.5;
    sim.source_position = Point::new(-3.0, 0.0);
    sim.derive_timing(&cfg.medium, 0.6);
    cfg.sim = sim;
    cfg
}

fn shard_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "shard" || e == "txt"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn build_read_resume_and_determinism() {
    let cfg = mini_config(42);
    let a = tempfile::tempdir().unwrap();
    let manifest = build_dataset(&cfg, a.path(), 1).unwrap();
    assert_eq!(manifest.total(Split::Train), 6);
    assert_eq!(manifest.total(Split::Val), 3);
    assert_eq!(manifest.total(Split::Test), 3);
    assert!(manifest.dedup.is_disjoint());

    let ds = Dataset::open(a.path()).unwrap();
    assert_eq!(ds.counts(), manifest.counts);
    for e in ds.entries() {
        assert_eq!(e.input.spec(), e.target.spec);
        assert_eq!(e.target.band_count(), 2);
        assert!(!e.input.is_vacant());
        assert!(e.target.values.iter().all(|v| (-40.0..=20.0).contains(v)));
    }
    assert!(verify_disjoint(ds.entries()).is_disjoint());

    // Same seed, other worker count: identical bytes.
    let b = tempfile::tempdir().unwrap();
    build_dataset(&cfg, b.path(), 3).unwrap();
    let reference = shard_bytes(a.path());
    assert_eq!(shard_bytes(b.path()), reference);

    // Interrupted shard (partial record) and a corrupted header are repaired.
    let train3 = b.path().join(shard_file_name(Split::Train, 3));
    let len = fs::metadata(&train3).unwrap().len();
    fs::OpenOptions::new().write(true).open(&train3).unwrap().set_len(len - 100).unwrap();
    let val4 = b.path().join(shard_file_name(Split::Val, 4));
    let mut bytes = fs::read(&val4).unwrap();
    bytes[0] ^= 0xff;
    fs::write(&val4, bytes).unwrap();
    assert!(read_shard(&train3, &cfg.bands).is_err());
    build_dataset(&cfg, b.path(), 1).unwrap();
    assert_eq!(shard_bytes(b.path()), reference);

    let tensors = ds.tensors(Split::Train).unwrap();
    assert_eq!(tensors.inputs.shape(), [6, 1, 16, 16]);
    assert_eq!(tensors.targets.shape(), [6, 2, 16, 16]);
    let batches: Vec<_> = tensors.iterate_minibatches(4, 0, 0).unwrap().collect();
    assert_eq!(batches.len(), 2);
    assert_eq!(batches[1].0.batch(), 2);
}

#[test]
fn injected_duplicate_is_regenerated_and_logged() {
    let cfg = mini_config(7);
    let dir = tempfile::tempdir().unwrap();
    let train_key = EntryKey { split: Split::Train, n_vertices: 4, index: 1 };
    let dup = draw_candidate(&cfg, train_key, 0).unwrap();
    assert!(!dup.occupancy.is_vacant());
    let manifest = build_dataset_with(&cfg, dir.path(), 1, &mut |key, attempt| {
        if key.split == Split::Test && key.n_vertices == 5 && attempt == 0 {
            Ok(dup.clone())
        } else {
            draw_candidate(&cfg, key, attempt)
        }
    })
    .unwrap();
    assert!(manifest
        .exclusions
        .iter()
        .any(|e| e.key.split == Split::Test && e.key.n_vertices == 5 && e.reason.contains("earlier split")));
    let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    assert!(text.contains("test n=5 index=0 attempt=0: exact match in an earlier split"));
    let ds = Dataset::open(dir.path()).unwrap();
    assert!(ds.split(Split::Test).iter().all(|e| e.input != dup.occupancy));
    assert!(verify_disjoint(ds.entries()).is_disjoint());

    // The checker itself flags a planted collision.
    let mut entries: Vec<DatasetEntry> = ds.entries().cloned().collect();
    let train = entries.iter().find(|e| e.key.split == Split::Train).unwrap().input.clone();
    entries.iter_mut().find(|e| e.key.split == Split::Test).unwrap().input = train;
    assert_eq!(verify_disjoint(&entries).collisions.len(), 1);
}
