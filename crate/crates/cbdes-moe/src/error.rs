//! Error types shared across the crate.

use thiserror::Error;

/// Unified error type for tensor ops, model construction, training, and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// A tensor had the wrong shape for the requested operation.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    /// A dimension violated an operation precondition (odd pooling extent,
    /// indivisible head count, empty batch, ...).
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    /// Bad configuration value (negative lambda, zero experts, ...).
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Misuse of the autodiff graph (backward on a non-scalar, second
    /// backward on a released graph).
    #[error("autodiff: {0}")]
    Autodiff(String),

    /// A checkpoint file failed validation (magic, version, CRC, length).
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(context: &'static str, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        Error::ShapeMismatch {
            context,
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}
