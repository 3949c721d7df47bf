//! Multitask pianoroll transcription: synthetic corpora, a constant-Q front
//! end, score alignment, a residual U-net and frame-level metrics.

pub mod align;
pub mod dsp;
pub mod eval;
pub mod midi;
pub mod model;
pub mod pipeline;
pub mod rolls;
pub mod scalar;
pub mod synth;

pub use scalar::Scalar;

/// Single-precision network, the training default.
pub type ModelParams32 = model::ModelParams<f32>;
/// Double-precision network for gradient checks.
pub type ModelParams64 = model::ModelParams<f64>;
pub type Tensor32 = model::Tensor<f32>;
pub type Tensor64 = model::Tensor<f64>;
pub type Checkpoint32 = model::Checkpoint<f32>;
