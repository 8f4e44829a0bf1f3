#![allow(dead_code)]

use std::path::Path;

use aqtc::data_io::manifest::Dataset;
use aqtc::data_io::synth::{generate_synthetic, SyntheticConfig};
use aqtc::trainer::TrainConfig;
use sha2::{Digest, Sha256};

/// Small planted dataset: `n` samples at width `dim`.
pub fn small_dataset(n: usize, dim: usize, seed: u64) -> Dataset {
    generate_synthetic(&SyntheticConfig {
        n_samples: n,
        dim,
        frames: 4,
        sentences: 3,
        steps: 2,
        max_buttons: 24,
        seed,
        ..Default::default()
    })
    .unwrap()
    .dataset
}

pub fn small_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        d_h: 8,
        heads: 2,
        seed: 3,
        ..Default::default()
    }
}

/// `(relative path, sha256)` of every file under `dir`, sorted.
pub fn tree_digest(dir: &Path) -> Vec<(String, String)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().display().to_string();
                let hash = Sha256::digest(std::fs::read(&path).unwrap());
                let hex = hash.iter().map(|b| format!("{b:02x}")).collect();
                out.push((rel, hex));
            }
        }
    }
    out.sort();
    out
}
