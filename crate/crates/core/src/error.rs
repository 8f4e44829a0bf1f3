use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index error: {0}")]
    Index(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("contract error: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("training diverged at epoch {epoch}, sample {sample}: {reason}")]
    Diverged {
        epoch: usize,
        sample: String,
        reason: String,
    },

    #[error("{path}: expected {expected} bytes for a {rows}x{cols} tensor, found {found}")]
    ByteLength {
        path: PathBuf,
        rows: usize,
        cols: usize,
        expected: u64,
        found: u64,
    },

    #[error("sample {sample}: missing tensor file {path}")]
    MissingFile { sample: String, path: PathBuf },

    #[error("sample {sample}: step {step} truth index {truth} out of range for {candidates} candidates")]
    TruthOutOfRange {
        sample: String,
        step: usize,
        truth: usize,
        candidates: usize,
    },

    #[error("duplicate sample id {0}")]
    DuplicateId(String),

    #[error("load error: {0}")]
    Load(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
