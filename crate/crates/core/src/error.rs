use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("bad tensor file format at offset {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("tensor file truncated at offset {offset}: need {needed} more bytes")]
    Truncated { offset: u64, needed: u64 },

    #[error("dtype/rank mismatch at offset {offset}: expected {expected}, found {found}")]
    Mismatch {
        offset: u64,
        expected: String,
        found: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("training aborted at step {step}: {msg}")]
    Training { step: usize, msg: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Numeric(_) => "numeric",
            Error::Contract(_) => "contract",
            Error::Geometry(_) => "geometry",
            Error::Format { .. } => "format",
            Error::Truncated { .. } => "truncated",
            Error::Mismatch { .. } => "mismatch",
            Error::Config(_) => "config",
            Error::Training { .. } => "training",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}
