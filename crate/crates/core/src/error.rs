use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask dimensions must be positive, got {width}x{height}")]
    EmptyDimensions { width: usize, height: usize },
    #[error("expected {expected} labels, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("label value {value} at (x={x}, y={y}) is outside 0..=3")]
    InvalidLabel { value: u8, x: usize, y: usize },
    #[error("rows have differing lengths")]
    RaggedRows,
}

#[derive(Debug, Error, PartialEq)]
pub enum QaError {
    #[error("threshold {0} is not one of 5, 10, 25, 50, 75, 90")]
    UnsupportedThreshold(u32),
    #[error("percentage {0} outside [0, 100]")]
    PercentOutOfRange(f64),
    #[error("dataset is empty")]
    EmptyDataset,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("prediction keys do not match gold: missing {missing:?}, extra {extra:?}")]
    KeyMismatch {
        missing: Vec<String>,
        extra: Vec<String>,
    },
    #[error("duplicate key {0}")]
    DuplicateKey(String),
    #[error("unknown answer token {token:?} for {key}")]
    UnknownToken { key: String, token: String },
    #[error("no items to score")]
    Empty,
}

/// Failures while reading or writing dataset files.
///
/// `Io` maps to exit code 2 in the CLI; everything else is a validation error.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Mask {
        path: PathBuf,
        #[source]
        source: MaskError,
    },
    #[error("{path}:{line}: {message}")]
    Record {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Qa(#[from] QaError),
}

impl DataError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        DataError::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, DataError::Io { .. })
    }
}
