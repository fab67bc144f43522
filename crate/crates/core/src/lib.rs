//! Depth-guided no-reference image quality assessment at desk scale.
//!
//! Two hierarchical feature extractors (RGB and depth) feed per-stage
//! squeeze-excitation bridge blocks, depth-queried cross-attention with
//! self-attention refinement, and a dilated-convolution scoring head. The
//! crate also ships the training recipe, rank-correlation metrics, density
//! separation, a synthetic RGB-D dataset generator, and checkpointing.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the `*64`
//! aliases below are what the trainer and CLI use.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod head;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tcb;
pub mod tensor;
pub mod training;

pub use error::{Error, Result, TensorError};
pub use scalar::Scalar;
pub use tensor::{BnMode, ConvSpec, Tensor};

/// Default 64-bit tensor used by the model, trainer, and CLI.
pub type Tensor64 = Tensor<f64>;
/// 64-bit model alias.
pub type DgiqaModel64 = model::DgiqaModel<f64>;
