use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("assets exceed the missing-data limit: {}", .0.join(", "))]
    TooMuchMissing(Vec<String>),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("unsupported model: {0}")]
    UnsupportedModel(String),

    #[error("all {count} candidates failed: {log}")]
    AllCandidatesFailed { count: usize, log: String },

    #[error("window {window}: {message}")]
    Window { window: usize, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True when the error comes from numerical failure rather than bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite { .. } | Error::AllCandidatesFailed { .. } => true,
            Error::Window { message, .. } => message.contains("non-finite"),
            _ => false,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
