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

    #[error("malformed header: {0}")]
    Format(String),

    #[error("cannot parse value at row {row}, col {col}: {token:?}")]
    Parse { row: usize, col: usize, token: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("empty domain: {0}")]
    EmptyDomain(String),

    #[error("no drainage outlet: {0}")]
    Drainage(String),

    #[error("index out of bounds: {0}")]
    Bounds(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command-line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Invalid(_) | Error::Checkpoint(_) => 2,
            Error::Numerical(_) => 4,
            _ => 3,
        }
    }
}
