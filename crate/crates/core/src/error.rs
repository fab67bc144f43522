//! Error types shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by tensor operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: dimension mismatch on axis {axis}: {left} vs {right}")]
    DimensionMismatch {
        op: &'static str,
        axis: usize,
        left: usize,
        right: usize,
    },

    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: shape {shape:?} does not hold {len} values")]
    ShapeValueMismatch {
        op: &'static str,
        shape: Vec<usize>,
        len: usize,
    },

    #[error("backward requires a scalar tensor, got {numel} elements")]
    NotScalar { numel: usize },

    #[error("{op}: output spatial size would be {size} on axis {axis} (must be >= 1)")]
    EmptyOutput {
        op: &'static str,
        axis: usize,
        size: isize,
    },

    #[error("batchnorm: degenerate variance, normalization group has a single element")]
    DegenerateVariance,

    #[error("resize_avg: axis {axis} size {from} is not an integer multiple of target {to}")]
    NonIntegerFactor { axis: usize, from: usize, to: usize },

    #[error("{op}: axis {axis} out of range for shape {shape:?}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

/// Top-level error type for model, training, and I/O code.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("config: {0}")]
    Config(String),

    #[error("manifest {path}: line {line}: {msg}")]
    Manifest {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error("training aborted: {0}")]
    Training(String),

    #[error("gradient for `{name}` is not finite")]
    NonFiniteGradient { name: String },

    #[error("parameter `{name}` received no gradient")]
    MissingGradient { name: String },

    #[error("metric: {0}")]
    Metric(String),

    #[error("{context}: image {h}x{w} is smaller than crop {ch}x{cw}; pad the input first")]
    CropTooLarge {
        context: &'static str,
        h: usize,
        w: usize,
        ch: usize,
        cw: usize,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
