use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the library reports.
///
/// The CLI maps [`Error::Io`] (and file-not-found style problems) to exit
/// code 2 and everything else to exit code 1; see [`Error::is_io`].
#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke an operation's precondition (shapes, ranges, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A value lies outside the mathematical domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A NaN or infinity showed up where a finite value is required.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: row {row}, column {column}: cannot parse {value:?} as a number")]
    CsvCell {
        path: PathBuf,
        row: usize,
        column: usize,
        value: String,
    },

    #[error("{path}: label column {column:?} not found in header")]
    MissingLabelColumn { path: PathBuf, column: String },

    #[error("{path}: malformed csv: {message}")]
    CsvFormat { path: PathBuf, message: String },

    #[error("checkpoint: bad magic bytes {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("checkpoint: unsupported version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint: file truncated while reading {what}")]
    Truncated { what: String },

    #[error("checkpoint: tensor {tensor:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        tensor: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of the environment rather than of the inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::Contract(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
