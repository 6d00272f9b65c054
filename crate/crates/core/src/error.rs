use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure classes, used by the CLI to pick an exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Data,
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{what} did not converge after {iterations} iterations (last residual {residual:e})")]
    NoConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("singular {what} in market {market}")]
    Singular { what: &'static str, market: i64 },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("market {market}: {source}")]
    Market {
        market: i64,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}, row {row}: {message}")]
    Schema {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("all {starts} optimizer starts failed: {diagnostics}")]
    AllStartsFailed { starts: usize, diagnostics: String },
}

impl Error {
    pub fn in_market(self, market: i64) -> Self {
        match self {
            e @ Error::Market { .. } => e,
            e => Error::Market {
                market,
                source: Box::new(e),
            },
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::InvalidInput(_)
            | Error::DimensionMismatch { .. }
            | Error::Io { .. }
            | Error::Schema { .. }
            | Error::Csv(_)
            | Error::Json(_) => ErrorKind::Data,
            Error::NoConvergence { .. }
            | Error::Singular { .. }
            | Error::NonFinite(_)
            | Error::AllStartsFailed { .. } => ErrorKind::Numerical,
            Error::Market { source, .. } => source.kind(),
        }
    }
}
