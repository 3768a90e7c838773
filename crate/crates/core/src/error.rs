use std::path::PathBuf;

use thiserror::Error;

use crate::abft::ErrorStats;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("internal error: {0}")]
    Internal(String),

    /// Recomputation budget ran out while the tile still showed critical errors.
    #[error("unrecoverable fault in tile {tile_id} after {rounds} recomputation rounds")]
    UnrecoverableFault {
        tile_id: usize,
        rounds: usize,
        stats: Box<ErrorStats>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Stable snake-case tag for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid_argument",
            Error::Internal(_) => "internal",
            Error::UnrecoverableFault { .. } => "unrecoverable_fault",
            Error::Io { .. } => "io",
            Error::Json { .. } => "json",
        }
    }
}
