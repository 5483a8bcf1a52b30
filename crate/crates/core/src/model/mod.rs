//! T5 v1.1 style encoder-decoder built on the autodiff tape.

mod bucket;
mod config;
mod decode;
mod forward;
mod params;

use thiserror::Error;

use crate::tensor::TensorError;

pub use bucket::{bucket_grid, relative_position_bucket};
pub use config::{HeadInit, ModelConfig, PRESETS};
pub use decode::{argmax, greedy_decode, ModelScorer, NextTokenScorer};
pub use forward::{decode_logits, encode_detached, forward_loss, Forward, LossGraph};
pub use params::{param_shapes, ModelParams, ParamVars};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown preset {name:?}; known presets: {known}")]
    UnknownPreset { name: String, known: String },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("parameter set does not match config: {0}")]
    ParamSet(String),
    #[error("parameter {name} has shape {found:?}, config expects {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
