//! Shared fixtures for the integration tests: datasets and a trained checkpoint
//! cached under the cargo target directory.
#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};

use invdes::learned_sim::{
    read_weights, train, write_weights, ModelHyper, ModelParams, TrainConfig,
};
use invdes::oracle_sim::{generate_dataset, load_dataset, DatasetConfig};
use invdes::state_graph::Trajectory;

pub const TRAIN_SEED: u64 = 1;
pub const HOLDOUT_SEED: u64 = 2;
pub const TRAIN_TRAJECTORIES: usize = 200;
pub const HOLDOUT_TRAJECTORIES: usize = 20;
pub const TRAIN_STEPS: usize = 20_000;

pub fn cache_dir() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("invdes-cache");
    std::fs::create_dir_all(&dir).expect("cache dir");
    dir
}

fn dataset(name: &str, seed: u64, count: usize) -> Vec<Trajectory> {
    let dir = cache_dir().join(name);
    let manifest = dir.join("manifest.json");
    if !manifest.exists() {
        let cfg = DatasetConfig {
            trajectories: count,
            ..DatasetConfig::default()
        };
        generate_dataset(seed, &cfg, &dir).expect("dataset generation");
    }
    load_dataset(&manifest).expect("dataset").1
}

pub fn training_set() -> Vec<Trajectory> {
    dataset("train-200", TRAIN_SEED, TRAIN_TRAJECTORIES)
}

pub fn holdout_set() -> Vec<Trajectory> {
    dataset("holdout-20", HOLDOUT_SEED, HOLDOUT_TRAJECTORIES)
}

pub fn default_hyper() -> ModelHyper {
    ModelHyper {
        width: 32,
        blocks: 3,
        ..ModelHyper::default()
    }
}

pub fn train_config() -> TrainConfig {
    TrainConfig {
        steps: TRAIN_STEPS,
        ..TrainConfig::default()
    }
}

pub fn checkpoint_path() -> PathBuf {
    cache_dir().join(format!(
        "w32-p3-{TRAIN_STEPS}-seed0-v{}.idw",
        env!("CARGO_PKG_VERSION")
    ))
}

pub fn store_checkpoint(params: &ModelParams) {
    let path = checkpoint_path();
    let tmp = path.with_extension("tmp");
    write_weights(&tmp, params).expect("write checkpoint");
    std::fs::rename(&tmp, &path).expect("publish checkpoint");
}

/// The standard trained model: read from the cache, or trained once and cached.
pub fn trained_checkpoint() -> ModelParams {
    static LOCK: OnceLock<Mutex<()>> = OnceLock::new();
    let _guard = LOCK
        .get_or_init(|| Mutex::new(()))
        .lock()
        .unwrap_or_else(|e| e.into_inner());
    let path = checkpoint_path();
    if let Ok(p) = read_weights(&path) {
        return p;
    }
    let out = train(&training_set(), default_hyper(), &train_config()).expect("training");
    store_checkpoint(&out.params);
    out.params
}

pub fn untrained_model(seed: u64) -> ModelParams {
    ModelParams::init(default_hyper(), seed).expect("init")
}

pub fn sha_free_bytes(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}
