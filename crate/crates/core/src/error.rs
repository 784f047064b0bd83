use thiserror::Error;

/// Errors produced by tensor operations, the tape, and the training harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor extents for an operation.
    #[error("shape error: {0}")]
    Shape(String),
    /// Invalid hyperparameter or configuration value.
    #[error("parameter error: {0}")]
    Param(String),
    /// A forward or backward pass produced a NaN or infinity.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// Malformed serialized data (VRST tensors, checkpoints, manifests).
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn param(msg: impl Into<String>) -> Self {
        Error::Param(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
