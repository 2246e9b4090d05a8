//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation received tensors whose shapes do not fit together.
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("conv2d: stride must be at least 1, got {0}")]
    NonPositiveStride(usize),

    #[error("grl: strength must be non-negative, got {0}")]
    NegativeStrength(f64),

    #[error("log: input must be strictly positive, found {0}")]
    LogDomain(f64),

    #[error("backward: loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("{0}")]
    InvalidArgument(String),

    /// The training path tried to reach target-domain annotations.
    #[error("annotation leak: {0}")]
    AnnotationLeak(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Config validation reports every violated invariant at once.
    #[error("invalid config:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            op,
            detail: detail.into(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
