use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the detection engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A caller broke a precondition of an operation (shape mismatch, unknown node, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A file did not match its declared layout.
    #[error("format error: {0}")]
    Format(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// NaN or infinite values reached a place that cannot recover from them.
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing embedding for template {id} ({text:?})")]
    MissingEmbedding { id: usize, text: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
