//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, StarError>;

#[derive(Debug, Error)]
pub enum StarError {
    /// An operator was fed tensors whose shapes do not conform.
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    /// Misuse of the computation tape (non-scalar loss, repeated backward, ...).
    #[error("tape error: {0}")]
    Tape(String),

    /// The optimizer refused an update because a gradient was NaN or infinite.
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed feature or checkpoint file.
    #[error("format error: {0}")]
    Format(String),

    #[error("config error: {0}")]
    Config(String),

    /// Checkpoint does not match the requested model or evaluation mode.
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at step {step}: {details}")]
    Diverged { step: usize, details: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl StarError {
    pub fn shape(op: &'static str, details: impl Into<String>) -> Self {
        StarError::ShapeMismatch { op, details: details.into() }
    }
}
