//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KserError {
    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {msg}")]
    DataFormat { path: PathBuf, msg: String },

    #[error("{path} line {line}: {msg}")]
    MalformedRow {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("knowledge pack error in field '{field}': {msg}")]
    Pack { field: String, msg: String },

    #[error("missing knowledge key '{key}' in field '{field}'")]
    MissingKey { field: String, key: String },

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error at {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl KserError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, KserError>;
