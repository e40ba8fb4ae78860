//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("transport error from {backend}: {message}")]
    Transport { backend: String, message: String },

    #[error("scripted backend exhausted after {0} replies")]
    ScriptExhausted(usize),

    #[error("unknown image reference: {0}")]
    UnknownImage(String),

    #[error("decomposition produced no subquestions")]
    EmptyDecomposition,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(message: impl Into<String>) -> Self {
        Error::Validation(message.into())
    }

    pub fn config(message: impl Into<String>) -> Self {
        Error::Config(message.into())
    }

    pub fn transport(backend: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Transport {
            backend: backend.into(),
            message: message.into(),
        }
    }
}
