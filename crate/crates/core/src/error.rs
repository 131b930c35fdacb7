use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Io,
    Numerical,
    Config,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {actual})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: byte offset {offset}: {message}")]
    BinaryParse {
        path: PathBuf,
        offset: usize,
        message: String,
    },

    #[error("system matrix is not positive definite ({detail})")]
    NotPositiveDefinite { node: Option<usize>, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. } | Error::Parse { .. } | Error::BinaryParse { .. } => ErrorKind::Io,
            Error::NotPositiveDefinite { .. } | Error::NonFinite(_) => ErrorKind::Numerical,
            Error::Config(_) => ErrorKind::Config,
            Error::Empty(_) | Error::InvalidInput(_) | Error::DimensionMismatch { .. } => {
                ErrorKind::Config
            }
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
