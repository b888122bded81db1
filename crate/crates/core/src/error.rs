use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PovError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("lookup error: unknown view id `{0}`")]
    UnknownView(String),

    #[error("parameter integrity error: {0}")]
    Integrity(String),

    #[error("corrupt file {path}: {reason}")]
    Corruption { path: PathBuf, reason: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("freeze violation: partitions {0:?} changed")]
    FreezeViolation(Vec<String>),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("prerequisite missing: {0}")]
    Prerequisite(String),
}

impl PovError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PovError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        PovError::Corruption {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, PovError>;
