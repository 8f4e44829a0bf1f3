//! Checkpoint directories: `checkpoint.json` plus one raw tensor file per
//! parameter, in the model's canonical parameter order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::TensorDescriptor;
use super::tensor_file::{read_tensor, write_tensor};
use super::{read_json, write_json, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Scalar;
use crate::trainer::TrainConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    /// 1-based epoch the parameters come from; `None` for an untrained model.
    pub best_epoch: Option<usize>,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    #[serde(flatten)]
    pub tensor: TensorDescriptor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub provenance: Provenance,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// Stored precision.
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(
        model: &Model<T>,
        train: Option<TrainConfig>,
        provenance: Provenance,
    ) -> Self {
        let params: ParamStore<f32> = model.store.cast();
        let entries = params
            .iter()
            .map(|(id, name, t)| ParamEntry {
                name: name.to_string(),
                tensor: TensorDescriptor {
                    path: format!("params/{:04}.bin", id.index()),
                    rows: t.rows(),
                    cols: t.cols(),
                },
            })
            .collect();
        Self {
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                model: model.config,
                train,
                provenance,
                params: entries,
            },
            params,
        }
    }

    /// Rebuilds the model, optionally requiring a specific configuration.
    pub fn to_model<T: Scalar>(&self, expected: Option<&ModelConfig>) -> Result<Model<T>> {
        if let Some(want) = expected {
            let got = &self.meta.model;
            if got != want {
                return Err(Error::Load(format!(
                    "checkpoint model config does not match: checkpoint has d_v={} d_t={} d_h={} heads={} d_o={} d_s={} {} (residual={}), expected d_v={} d_t={} d_h={} heads={} d_o={} d_s={} {} (residual={})",
                    got.d_v, got.d_t, got.d_h, got.heads, got.d_o, got.d_s, got.step_variant, got.cascade_residual,
                    want.d_v, want.d_t, want.d_h, want.heads, want.d_o, want.d_s, want.step_variant, want.cascade_residual,
                )));
            }
        }
        Model::with_store(self.meta.model, self.params.cast())
    }
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (entry, (_, _, t)) in ckpt.meta.params.iter().zip(ckpt.params.iter()) {
        write_tensor(&dir.join(&entry.tensor.path), t)?;
    }
    write_json(&dir.join(CHECKPOINT_FILE), &ckpt.meta)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let meta_path = dir.join(CHECKPOINT_FILE);
    let meta: CheckpointMeta = read_json(&meta_path)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Load(format!(
            "{}: format version {} (supported: {FORMAT_VERSION})",
            meta_path.display(),
            meta.format_version
        )));
    }
    let mut params = ParamStore::new();
    for entry in &meta.params {
        let t = read_tensor(&dir.join(&entry.tensor.path), entry.tensor.rows, entry.tensor.cols)?;
        params.register(entry.name.clone(), t)?;
    }
    Ok(Checkpoint { meta, params })
}
