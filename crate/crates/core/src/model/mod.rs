//! Slice encoder, projector, instruction-conditioned prefix decoder,
//! segmentation head, poolers and alignment mappers.

mod checkpoint;
mod config;
mod forward;
mod generate;
mod state;

use thiserror::Error;

use crate::tensor::TensorError;
use crate::text::TextError;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint,
};
pub use config::{InstructionSet, ModelConfig};
pub use forward::{patchify, prefix_mask, select};
pub use generate::{argmax, nucleus_sample, SamplingConfig};
pub use state::{parameter_count, ModelState, Params};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("sequence of {len} positions exceeds capacity {cap}")]
    Overlong { len: usize, cap: usize },
    #[error("token id {0} outside the vocabulary")]
    UnknownToken(usize),
    #[error("empty text")]
    EmptyText,
    #[error("invalid sampling settings: {0}")]
    Sampling(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
