use thiserror::Error;

/// Errors raised by tensor construction, kernels, modules and pipelines.
#[derive(Debug, Error)]
pub enum GaldError {
    #[error("shape product overflows the index type: {0:?}")]
    Overflow([usize; 4]),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("tensor file format error: {0}")]
    Format(String),
    #[error("tensor payload length mismatch: header declares {expected} elements, payload holds {actual}")]
    Length { expected: usize, actual: usize },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("problem too large: {0}")]
    TooLarge(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GaldError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(GaldError::Shape(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(GaldError::Config(msg.into()))
}
