//! Multi-step instructional question answering over precomputed video,
//! script, question, answer, and button-image embeddings.
//!
//! The pipeline: every feature is projected by its own PReLU MLP; candidate
//! button images attend over candidate answers, then the question, then the
//! script; the script-attention weights re-weight a script-over-video
//! attention; the four views are fused and scored by a GRU (or MLP) step
//! network that carries state across answer steps.
//!
//! Everything runs on a small dense-matrix engine with reverse-mode autodiff
//! ([`autodiff`]), checked against central finite differences
//! ([`gradcheck`]).

pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod data_io;
pub mod error;
pub mod gradcheck;
pub mod grounding;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod step_network;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Precision, Scalar, Tensor};
