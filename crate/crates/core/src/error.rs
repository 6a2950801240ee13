use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters or configuration (out-of-range ids, bad sizes).
    #[error("configuration error: {0}")]
    Config(String),

    /// Arguments of incompatible length or dimension.
    #[error("input error: {0}")]
    Input(String),

    /// Tensor extents that do not agree.
    #[error("shape error: {0}")]
    Shape(String),

    /// Inconsistent or unusable data (e.g. a label row with no finite entry).
    #[error("data error: {0}")]
    Data(String),

    /// A malformed record in an ingested file.
    #[error("{path}:{line}: {message}")]
    Ingest {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed container: {0}")]
    Format(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 for configuration problems, 3 for data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) | Error::Shape(_) => 2,
            Error::Data(_) | Error::Ingest { .. } | Error::Io { .. } | Error::Format(_) => 3,
        }
    }
}
