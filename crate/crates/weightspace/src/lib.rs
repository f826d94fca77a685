//! Task-agnostic representation learning over neural-network weight spaces.
//!
//! The pipeline: train populations of small base models (`zoo`), align them
//! to a reference basis (`align`), slice their weights into fixed-width token
//! sequences (`tokenizer`), pretrain a sequential transformer autoencoder on
//! token windows (`autoencoder`), embed whole models by haloed chunking
//! (`embed`), probe the embeddings for model properties and compare against
//! spectral weight diagnostics (`analyze`), and generate new model weights by
//! kernel-density sampling in embedding space (`sample`).
//!
//! All numeric code is generic over [`Scalar`]; the pipeline default is
//! `f32`, oracles and gradient checks run in `f64`.

pub mod align;
pub mod analyze;
pub mod assignment;
pub mod autoencoder;
pub mod config;
pub mod container;
pub mod embed;
pub mod error;
pub mod graph;
pub mod optim;
pub mod sample;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;
pub mod zoo;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// 32-bit tensors: the default pipeline precision.
pub type Tensor32 = Tensor<f32>;
/// 64-bit tensors: gradient checks and reference oracles.
pub type Tensor64 = Tensor<f64>;
