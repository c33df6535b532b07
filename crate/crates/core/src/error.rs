use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("non-finite {tensor} at iteration {iteration}")]
    NonFinite { tensor: String, iteration: u64 },

    #[error("outside the low-SNR regime: {0}")]
    Regime(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("inconclusive: {0}")]
    Inconclusive(String),
}

impl From<serde_json::Error> for Error {
    fn from(err: serde_json::Error) -> Self {
        if err.is_io() {
            Error::Io(err.into())
        } else {
            Error::Parse(err.to_string())
        }
    }
}
