//! On-disk formats and the synthetic dataset generator.
//!
//! A dataset is a directory holding `manifest.json` and raw tensor files.
//! Tensor files are little-endian `f32` in row-major order with no header;
//! their shapes live only in the manifest. Checkpoints reuse the same
//! `(path, rows, cols)` descriptors.

pub mod checkpoint;
pub mod manifest;
pub mod synth;
pub mod tensor_file;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Provenance};
pub use manifest::{load_dataset, save_dataset, Dataset, Manifest, TensorDescriptor};
pub use synth::{generate_synthetic, SyntheticConfig, SyntheticDataset};

pub const FORMAT_VERSION: u32 = 1;

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Pretty JSON with a trailing newline.
pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}
