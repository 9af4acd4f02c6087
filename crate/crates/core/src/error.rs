//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Bad magic, unsupported version, or malformed container contents.
    #[error("format error: {0}")]
    Format(String),

    /// File ends mid-record or mid-field.
    #[error("corrupt file {path}: truncated at byte offset {offset}")]
    Corrupt { path: PathBuf, offset: u64 },

    /// Tensor/vector dimension mismatch.
    #[error("shape error: {0}")]
    Shape(String),

    /// Invalid run configuration (unknown keys, bad values, missing fields).
    #[error("config error: {0}")]
    Config(String),

    /// Degenerate or unusable data (zero norms, empty streams, missing token ids).
    #[error("data error: {0}")]
    Data(String),

    /// Fixed-format interpretation response could not be parsed.
    #[error("parse error in field `{field}`: {detail}")]
    Parse { field: String, detail: String },

    /// External interpretation endpoint failure.
    #[error("endpoint error: {0}")]
    Endpoint(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
