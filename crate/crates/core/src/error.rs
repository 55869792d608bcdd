use std::path::PathBuf;

use crate::oracle::OracleError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("malformed manifest {}: {reason}", path.display())]
    Manifest { path: PathBuf, reason: String },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("payload holds {found} values but manifest declares {count} x {dim}")]
    PayloadSize { count: usize, dim: usize, found: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("duplicate doc_id {0:?}")]
    DuplicateId(String),

    #[error("unknown doc_id {0:?}")]
    UnknownId(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("degenerate latent (zero norm) for {0}")]
    DegenerateLatent(String),

    #[error("degenerate workload: {0}")]
    DegenerateWorkload(String),

    #[error("bin grids differ ({left} vs {right} bins)")]
    GridMismatch { left: usize, right: usize },

    #[error(transparent)]
    Oracle(#[from] OracleError),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
