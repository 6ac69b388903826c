use std::io;

use thiserror::Error;

/// Errors produced anywhere in the training / accounting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-range input data (dimension mismatch, empty batch, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Operation attempted in a state that does not allow it.
    #[error("state error: {0}")]
    State(String),

    /// NaN or infinite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Binary archive parse failure.
    #[error("parse error at byte offset {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn state(msg: impl Into<String>) -> Self {
        Error::State(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}
