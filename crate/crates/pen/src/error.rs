//! Error types shared across the crate.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PenError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("corpus error at line {line}: {msg}")]
    Corpus { line: usize, msg: String },

    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("embedding archive error: {0}")]
    Archive(String),

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, PenError>;

impl PenError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PenError::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 2 for config/schema problems, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            PenError::Config(_) => 2,
            _ => 3,
        }
    }
}
