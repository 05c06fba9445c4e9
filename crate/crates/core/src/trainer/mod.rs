//! Joint optimization of report generation and clue alignment, validation,
//! checkpointing and the ablation matrix.

mod config;
mod fit;
mod optim;
mod step;

use std::path::PathBuf;

use thiserror::Error;

pub use config::{ModelOverrides, Precision, TrainConfig};
pub use fit::{
    ablate, evaluate, evaluate_samples, fit, load_galleries, AblationRow, AblationTable,
    FitOutcome, BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE, NON_FINITE_LIMIT, SUBWORD_MERGES,
};
pub use optim::{clip_global_norm, global_norm, AdamW};
pub use step::{
    batch_gradients, batch_loss, retrieved_targets, train_step, BagOfWords, BatchItem, StepContext,
};

use crate::clinic::DataError;
use crate::clues::{ClueError, FormatError};
use crate::losses::LossError;
use crate::metrics::MetricError;
use crate::model::ModelError;
use crate::tensor::TensorError;
use crate::text::TextError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config: {0}")]
    Config(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("gallery: {0}")]
    Format(#[from] FormatError),
    #[error("no gallery for sample {0}")]
    GalleryMissing(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Clue(#[from] ClueError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("shape: {0}")]
    Shape(String),
    #[error("non-finite {0}")]
    NonFinite(String),
    #[error("aborted after {0} consecutive non-finite steps")]
    Diverged(usize),
}

impl TrainError {
    /// True for numeric failures, however deeply wrapped.
    pub fn is_numeric(&self) -> bool {
        match self {
            TrainError::NonFinite(_) | TrainError::Diverged(_) => true,
            TrainError::Tensor(t)
            | TrainError::Model(ModelError::Tensor(t))
            | TrainError::Loss(LossError::Tensor(t)) => {
                matches!(t, TensorError::NonFinite { .. })
            }
            TrainError::Loss(LossError::NonFinite(_)) => true,
            _ => false,
        }
    }
}
