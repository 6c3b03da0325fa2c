use thiserror::Error;

/// Errors produced by the kernel, spectral, iteration and selection routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum KgdError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("ingestion error at row {row}: {message}")]
    Ingestion { row: usize, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for KgdError {
    fn from(err: std::io::Error) -> Self {
        KgdError::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, KgdError>;

pub(crate) fn invalid(msg: impl Into<String>) -> KgdError {
    KgdError::InvalidArgument(msg.into())
}
