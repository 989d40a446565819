use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library. Variants carry enough context to name the
/// offending field without a backtrace.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{what} index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("non-finite value {value} in {context}")]
    NonFinite { context: &'static str, value: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("{path}: wrong magic number, expected {expected:#010x}, found {found:#010x}")]
    WrongMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated {field}, expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        field: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{path}: {field} is {found}, expected {expected}")]
    BadHeader {
        path: PathBuf,
        field: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("{path}: label {label} at position {position} exceeds 9")]
    LabelOutOfRange {
        path: PathBuf,
        position: usize,
        label: u8,
    },

    #[error("image/label count mismatch: {images} images, {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("unsupported checkpoint format_version {0}")]
    UnsupportedFormat(u32),

    #[error("io error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
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
