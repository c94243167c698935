use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unrecognized format: {0}")]
    UnrecognizedFormat(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("dimension overflow: {rows} x {cols}")]
    DimensionOverflow { rows: u64, cols: u64 },

    #[error("row-count mismatch: feature set `{name}` has {found} rows, expected {expected}")]
    RowCountMismatch {
        name: String,
        expected: usize,
        found: usize,
    },

    #[error("duplicate feature set name `{0}`")]
    DuplicateFeature(String),

    #[error("non-finite value in `{name}` at row {row}, column {col}")]
    NonFinite { name: String, row: usize, col: usize },

    #[error("zero-norm row for item `{item}` in feature set `{name}`")]
    ZeroNorm { name: String, item: String },

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cancelled")]
    Cancelled,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }
}
