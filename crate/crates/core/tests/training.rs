mod common;

use std::collections::BTreeMap;
use std::path::Path;

use favla::io::dataset::{read_episode, write_episode, Dataset, MANIFEST_FILE};
use favla::model::ModelConfig;
use favla::simsuite::{TaskKind, TaskSpec};
use favla::training::{generate_dataset, train, LabelingConfig, TrainConfig, METRICS_FILE, MODEL_FILE};
use favla::Error;
use sha2::{Digest, Sha256};

fn hashes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let key = p.strip_prefix(dir).unwrap().display().to_string();
                out.insert(key, Sha256::digest(std::fs::read(&p).unwrap()).to_vec());
            }
        }
    }
    out
}

fn small_dataset(dir: &Path, kind: TaskKind, episodes: usize, seed: u64) {
    let spec = TaskSpec::default_for(kind);
    generate_dataset(&spec, episodes, seed, &LabelingConfig::default(), 10, dir).unwrap();
}

/// Small model that still matches the simulator's observation sizes.
fn small_model() -> ModelConfig {
    let mut cfg = common::tiny_config();
    cfg.slow.vision_dim = 16;
    cfg.slow.tcn.window = 10;
    cfg.fast.horizon = 16;
    cfg
}

fn quick_train() -> TrainConfig {
    TrainConfig {
        iterations: 30,
        batch_size: 4,
        warmup: 5,
        checkpoint_every: 10,
        ..TrainConfig::default()
    }
}

#[test]
fn datasets_regenerate_byte_identically_with_valid_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    small_dataset(&a, TaskKind::Wipe, 4, 3);
    small_dataset(&b, TaskKind::Wipe, 4, 3);
    assert_eq!(hashes(&a), hashes(&b));
    let d = Dataset::load(&a).unwrap();
    assert_eq!(d.episodes.len(), 4);
    for ep in &d.episodes {
        assert_eq!(ep.labels.len(), ep.frames());
        assert!(ep.labels.iter().all(|l| (0.0..1.0).contains(l)));
        assert!(ep.history.iter().all(|w| w.len() == 10));
    }
    assert!(d.manifest.label.sigma > 0.0);
}

#[test]
fn zero_episodes_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let spec = TaskSpec::default_for(TaskKind::Peg);
    let err = generate_dataset(&spec, 0, 1, &LabelingConfig::default(), 10, tmp.path()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn episode_files_round_trip_and_reject_damage() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("d");
    small_dataset(&dir, TaskKind::Peg, 1, 5);
    let d = Dataset::load(&dir).unwrap();
    let file = dir.join(&d.manifest.episodes[0].file);
    let ep = read_episode(&file).unwrap();
    let copy = tmp.path().join("copy.bin");
    write_episode(&copy, &ep).unwrap();
    assert_eq!(std::fs::read(&copy).unwrap(), std::fs::read(&file).unwrap());
    assert_eq!(read_episode(&copy).unwrap(), ep);

    let bytes = std::fs::read(&file).unwrap();
    let damaged = tmp.path().join("damaged.bin");
    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    std::fs::write(&damaged, &bad_magic).unwrap();
    assert!(matches!(read_episode(&damaged), Err(Error::Format { .. })));
    std::fs::write(&damaged, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(read_episode(&damaged), Err(Error::Format { .. })));
    std::fs::write(&damaged, &bytes[..bytes.len() - 4000]).unwrap();
    assert!(read_episode(&damaged).is_err());

    std::fs::write(dir.join(MANIFEST_FILE), "{\"format\": \"other\"}").unwrap();
    assert!(Dataset::load(&dir).is_err());
}

#[test]
fn training_is_seed_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data, TaskKind::Peg, 3, 9);
    let dataset = Dataset::load(&data).unwrap();
    let runs: Vec<_> = ["r1", "r2"]
        .iter()
        .map(|r| {
            let out = tmp.path().join(r);
            let s = train(&small_model(), &quick_train(), 16, &dataset, 4, &out).unwrap();
            (out, s)
        })
        .collect();
    assert_eq!(hashes(&runs[0].0), hashes(&runs[1].0));
    assert_eq!(runs[0].1, runs[1].1);
    let out = &runs[0].0;
    assert!(out.join(MODEL_FILE).is_file());
    assert!(out.join("checkpoints/iter_000010.json").is_file());
    let metrics = std::fs::read_to_string(out.join(METRICS_FILE)).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("iter,loss_total,loss_action,loss_var,lr"));
    for l in lines {
        let v: Vec<f64> = l.split(',').map(|x| x.parse().unwrap()).collect();
        assert!((v[1] - (v[2] + 0.1 * v[3])).abs() < 1e-12, "row {l}");
    }
    let other = train(&small_model(), &quick_train(), 16, &dataset, 5, &tmp.path().join("r3")).unwrap();
    assert_ne!(other.final_loss, runs[0].1.final_loss);
}

#[test]
fn divergence_stops_with_a_saved_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data, TaskKind::Peg, 2, 10);
    let dataset = Dataset::load(&data).unwrap();
    let cfg = TrainConfig {
        lr: 1e150,
        lr_final: 1e150,
        warmup: 0,
        grad_clip: 0.0,
        ..quick_train()
    };
    let out = tmp.path().join("run");
    let err = train(&small_model(), &cfg, 16, &dataset, 1, &out).unwrap_err();
    assert!(matches!(err, Error::NonFinite(_)), "{err}");
    assert!(out.join("last_good.json").is_file());
    assert!(!out.join(MODEL_FILE).exists());
}
