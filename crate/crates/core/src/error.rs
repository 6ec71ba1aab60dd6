use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration value is out of range or inconsistent with its inputs.
    #[error("invalid configuration `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("invalid argument: {0}")]
    Argument(String),

    /// `W·v` was too small to normalize.
    #[error("degenerate embedding: pre-normalization norm {norm:e} is below 1e-12")]
    DegenerateEmbedding { norm: f64 },

    #[error("solver failure: {0}")]
    Solver(String),

    /// An operation was called out of order (e.g. gradient before u-update).
    #[error("trainer state error: {0}")]
    State(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("bad magic bytes in {path}")]
    BadMagic { path: PathBuf },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u16, expected: u16 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("checksum mismatch: manifest says {expected}, payload hashes to {found}")]
    Checksum { expected: String, found: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
