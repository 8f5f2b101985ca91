use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the toolkit can report.
///
/// The variants are grouped so callers (the CLI in particular) can map them
/// onto coarse categories with [`Error::category`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Shape(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("gradient error: {0}")]
    Gradient(String),

    #[error("{0}")]
    InvalidInput(String),

    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("row {row}: {message}")]
    Row { row: usize, message: String },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("checkpoint has bad magic")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    #[error("checkpoint index out of bounds: {0}")]
    OutOfBounds(String),

    /// Displays the path only; the cause is the error source.
    #[error("{}", path.display())]
    File {
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Coarse failure classes, used for exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Usage,
    Data,
    Numeric,
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Attach a file path to an error.
    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::File {
            path: path.into(),
            source: Box::new(self),
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::NonFinite(_) => ErrorCategory::Numeric,
            Error::Config(_) => ErrorCategory::Usage,
            Error::File { source, .. } => source.category(),
            _ => ErrorCategory::Data,
        }
    }
}
