use std::path::PathBuf;

use diffcore::DiffError;
use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] DiffError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("token id {id} outside vocabulary of size {vocab}")]
    Token { id: usize, vocab: usize },
    #[error("caption error: {0}")]
    Caption(String),
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    Version { found: String, expected: String },
    #[error("non-finite {what} at step {step} ({phase})")]
    NonFinite {
        what: String,
        phase: String,
        step: u64,
    },
    #[error("{0}")]
    Invalid(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable category used in command-line error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Config(_) => "config",
            Error::Token { .. } => "token",
            Error::Caption(_) => "caption",
            Error::Record { .. } => "record",
            Error::Checkpoint(_) => "checkpoint",
            Error::Version { .. } => "version",
            Error::NonFinite { .. } => "non-finite",
            Error::Invalid(_) => "invalid",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}
