use std::fmt::Display;

/// Errors produced across the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("format error: {0}")]
    Format(String),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("tape state error: {0}")]
    State(String),
    #[error("numeric divergence: {0}")]
    Divergence(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn arg(msg: impl Display) -> Self {
        Error::Argument(msg.to_string())
    }

    pub(crate) fn shape(msg: impl Display) -> Self {
        Error::Shape(msg.to_string())
    }
}
