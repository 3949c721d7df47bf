//! Residual U-net with a pitch/instrument multitask objective.

pub mod checkpoint;
pub mod layers;
pub mod loss;
pub mod predict;
pub mod tensor;
pub mod train;
pub mod unet;

use thiserror::Error;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointError};
pub use loss::{bce_with_logits, multitask_loss, sigmoid, LossBreakdown};
pub use predict::{check_marginals, predict, predict_spectrogram, PredictError, Prediction};
pub use tensor::Tensor;
pub use train::{load_clip, train, ClipError, StepRecord, TrainConfig, TrainError, TrainingSet};
pub use unet::{is_learnable, ForwardCache, Grads, ModelConfig, ModelParams, Param};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("model configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("forward cache is stale: parameters changed since the forward pass")]
    StaleCache,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("labels: {0}")]
    Labels(String),
}
