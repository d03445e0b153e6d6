//! Online multi-object tracking for flowing-microscopy plankton video.
//!
//! The pipeline runs per frame: a texture-enhanced encoder ([`tfe`]) produces
//! stride-4 features, an attention-based association module ([`ata`]) turns
//! the previous and current features into a similarity volume and
//! soft-argmax offsets, movement refinement ([`fmr`]) removes the common flow
//! from those offsets and propagates gated previous features, and a
//! CenterNet-style [`head`] detects objects that the [`tracker`] links into
//! tracks. Everything numeric is generic over [`Scalar`]; the aliases below
//! fix the precision.

pub mod ata;
pub mod cli;
pub mod config;
pub mod data_synth;
pub mod dataset;
pub mod error;
pub mod fmr;
pub mod head;
pub mod metrics;
pub mod model;
pub mod mot;
pub mod nn;
pub mod render;
pub mod scalar;
pub mod tensor;
pub mod tfe;
pub mod tracker;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Single-precision model used for training and tracking.
pub type Model32 = model::Model<f32>;
/// Double-precision model, used for gradient checks.
pub type Model64 = model::Model<f64>;
pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tracker32<'m> = tracker::Tracker<'m, f32>;
pub type TrainSequence32 = train::TrainSequence<f32>;
