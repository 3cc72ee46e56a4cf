use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left} vs {right}")]
    Dimension {
        op: &'static str,
        left: String,
        right: String,
    },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: truncated file, expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },

    #[error("{path}: bad magic, expected {expected:?}")]
    BadMagic { path: PathBuf, expected: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: impl Into<String>, right: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            left: left.into(),
            right: right.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this failure class.
    ///
    /// `2` config, `3` data and I/O, `4` numeric, `1` everything else
    /// (shape and contract errors indicate a bug rather than bad input).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_)
            | Error::Truncated { .. }
            | Error::BadMagic { .. }
            | Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
            Error::Dimension { .. } | Error::Contract(_) => 1,
        }
    }
}
