use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid convolution spec: {0}")]
    Spec(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("gradient tape: {0}")]
    Tape(String),
    #[error("weight store: {0}")]
    Store(String),
    #[error("image file: {0}")]
    Image(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
