//! Latent anchor refinement with stability-based adaptive halting on a small
//! decoder-only transformer, plus the autodiff engine, synthetic task and
//! training loop it needs.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the common choices.

pub mod anchor;
pub mod backbone;
pub mod checkpoint;
pub mod decoding;
pub mod error;
pub mod gradcheck;
pub mod halting;
pub mod model;
pub mod scalar;
pub mod synthetic;
pub mod tape;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use anchor::{AnchorParams, AnchorState, RefinementConfig};
pub use backbone::{AnchorAttention, Backbone, BackboneConfig};
pub use decoding::{DecodeConfig, Prediction};
pub use error::{Error, Result};
pub use halting::{HaltingConfig, HaltingTrace, StepPolicy};
pub use model::{Model, ModelKind};
pub use scalar::Scalar;
pub use tape::{Graph, ParamSet};
pub use tasks::{ProblemInstance, Vocabulary};
pub use tensor::Tensor;
pub use training::{Trainer, TrainingConfig};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Graph64 = Graph<f64>;
pub type Graph32 = Graph<f32>;
pub type Model64 = Model<f64>;
pub type Model32 = Model<f32>;
