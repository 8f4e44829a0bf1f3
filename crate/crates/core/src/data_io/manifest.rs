use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor_file::{read_tensor, write_tensor};
use super::{read_json, write_json, FORMAT_VERSION};
use crate::error::{Error, Result};
use crate::grounding::{FeatureBundle, StepCandidates};
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorDescriptor {
    /// Relative to the manifest's directory.
    pub path: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepEntry {
    pub answers: TensorDescriptor,
    pub images: TensorDescriptor,
    pub truth: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub id: String,
    pub button_count: usize,
    pub video: TensorDescriptor,
    pub script: TensorDescriptor,
    pub question: TensorDescriptor,
    pub steps: Vec<StepEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub d_v: usize,
    pub d_t: usize,
    pub samples: Vec<SampleEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub d_v: usize,
    pub d_t: usize,
    pub samples: Vec<FeatureBundle>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, samples: Vec<FeatureBundle>) -> Dataset {
        Dataset {
            d_v: self.d_v,
            d_t: self.d_t,
            samples,
        }
    }
}

fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

fn load_tensor(root: &Path, sample: &str, d: &TensorDescriptor) -> Result<Tensor<f32>> {
    let path = root.join(&d.path);
    if !path.is_file() {
        return Err(Error::MissingFile {
            sample: sample.to_string(),
            path,
        });
    }
    read_tensor(&path, d.rows, d.cols)
}

/// Loads a dataset from a manifest file or a directory containing one.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let manifest_file = manifest_path(path);
    let manifest: Manifest = read_json(&manifest_file)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Load(format!(
            "{}: format version {} (supported: {FORMAT_VERSION})",
            manifest_file.display(),
            manifest.format_version
        )));
    }
    let root = manifest_file.parent().unwrap_or(Path::new("."));

    let mut seen = HashSet::new();
    for s in &manifest.samples {
        if !seen.insert(s.id.as_str()) {
            return Err(Error::DuplicateId(s.id.clone()));
        }
    }

    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in &manifest.samples {
        let id = entry.id.as_str();
        for (i, step) in entry.steps.iter().enumerate() {
            if step.truth >= step.answers.rows {
                return Err(Error::TruthOutOfRange {
                    sample: entry.id.clone(),
                    step: i,
                    truth: step.truth,
                    candidates: step.answers.rows,
                });
            }
        }
        let steps = entry
            .steps
            .iter()
            .map(|s| {
                Ok(StepCandidates {
                    answers: load_tensor(root, id, &s.answers)?,
                    images: load_tensor(root, id, &s.images)?,
                    truth: s.truth,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let bundle = FeatureBundle {
            id: entry.id.clone(),
            button_count: entry.button_count,
            video: load_tensor(root, id, &entry.video)?,
            script: load_tensor(root, id, &entry.script)?,
            question: load_tensor(root, id, &entry.question)?,
            steps,
        };
        bundle.validate(manifest.d_v, manifest.d_t)?;
        samples.push(bundle);
    }
    Ok(Dataset {
        d_v: manifest.d_v,
        d_t: manifest.d_t,
        samples,
    })
}

/// Writes `manifest.json` plus one tensor file per feature under `dir`.
pub fn save_dataset(dir: &Path, dataset: &Dataset) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(dataset.samples.len());
    for bundle in &dataset.samples {
        if !seen.insert(bundle.id.as_str()) {
            return Err(Error::DuplicateId(bundle.id.clone()));
        }
        bundle.validate(dataset.d_v, dataset.d_t)?;
        let put = |name: String, t: &Tensor<f32>| -> Result<TensorDescriptor> {
            let rel = format!("tensors/{}/{name}.bin", bundle.id);
            write_tensor(&dir.join(&rel), t)?;
            Ok(TensorDescriptor {
                path: rel,
                rows: t.rows(),
                cols: t.cols(),
            })
        };
        let video = put("video".into(), &bundle.video)?;
        let script = put("script".into(), &bundle.script)?;
        let question = put("question".into(), &bundle.question)?;
        let steps = bundle
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| {
                Ok(StepEntry {
                    answers: put(format!("step{i}_answers"), &s.answers)?,
                    images: put(format!("step{i}_images"), &s.images)?,
                    truth: s.truth,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        entries.push(SampleEntry {
            id: bundle.id.clone(),
            button_count: bundle.button_count,
            video,
            script,
            question,
            steps,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        d_v: dataset.d_v,
        d_t: dataset.d_t,
        samples: entries,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}
