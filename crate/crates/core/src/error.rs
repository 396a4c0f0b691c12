use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A softmax row in which every entry is masked out.
    #[error("degenerate attention row {row}: no attendable positions")]
    DegenerateRow { row: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("chunk {0} not found in store")]
    NotFound(String),

    #[error("malformed cache file: {0}")]
    Format(String),

    #[error("stale cache {chunk}: fingerprint {found} does not match expected {expected}")]
    StaleCache {
        chunk: String,
        expected: String,
        found: String,
    },

    #[error("no retrievable context: the store is empty")]
    NoContext,

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("chunk {index} of document {document}: {source}")]
    Chunk {
        document: String,
        index: usize,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
