use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("character {ch:?} at offset {offset} is not in the vocabulary")]
    Encoding { ch: char, offset: usize },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("sequence of length {len} exceeds model capacity {max}")]
    Capacity { len: usize, max: usize },

    #[error("mode error: {0}")]
    Mode(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("state error: {0}")]
    State(String),

    #[error("checkpoint {path:?}: {kind}")]
    Checkpoint { path: PathBuf, kind: CheckpointError },

    #[error("training diverged at epoch {epoch}, step {step}: {message}")]
    Training {
        epoch: usize,
        step: usize,
        message: String,
    },

    #[error("statistical test undefined: {0}")]
    UndefinedTest(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported format version {found} (this build reads {supported})")]
    Version { found: u32, supported: u32 },
    #[error("file is truncated")]
    Truncated,
    #[error("checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("malformed header: {0}")]
    Header(String),
}

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Data,
    Runtime,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Training { .. } | Error::Io(_) | Error::Csv(_) | Error::UndefinedTest(_) => {
                ErrorClass::Runtime
            }
            _ => ErrorClass::Data,
        }
    }
}
