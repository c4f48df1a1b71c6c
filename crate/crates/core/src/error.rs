//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed input record; `line` is 1-based.
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A domain invariant was violated; `field` names the offending field.
    #[error("validation failed for {field}: {msg}")]
    Validation { field: String, msg: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("provider error: {0}")]
    Provider(String),

    /// File-backed embedding store has no vector for this canon hash.
    #[error("missing embedding for canon key {0}")]
    MissingEmbedding(String),

    #[error("step index {index} out of range 1..={len}")]
    IndexOutOfRange { index: usize, len: usize },

    /// A statistic is undefined on the given sample (constant input,
    /// single class, too few points).
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
