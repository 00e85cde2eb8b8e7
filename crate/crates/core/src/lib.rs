//! Numerical laboratory for a one-block attention model trained by
//! layer-wise or end-to-end gradient descent on synthetic analogical and
//! two-hop tasks, plus layer-wise training of deep linear networks.
//!
//! Everything numerical is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the `f64` instantiation used by the experiments.

pub mod batch;
pub mod datasets;
pub mod deep_linear;
pub mod embeddings;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use model::{Activation, Groups};
pub use scalar::Scalar;

pub type ModelParamsF64 = embeddings::ModelParams<f64>;
pub type ModelParamsF32 = embeddings::ModelParams<f32>;
pub type CorpusF64 = datasets::Corpus<f64>;
pub type EmbeddingTableF64 = embeddings::EmbeddingTable<f64>;
pub type PromptF64 = model::Prompt<f64>;
pub type RunResultF64 = training::RunResult<f64>;
pub type LinearStackF64 = deep_linear::LinearStack<f64>;
