//! Crate-wide error type.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration value failed validation.
    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A malformed record in a line-oriented file; `line` is 1-based.
    #[error("{path}: line {line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    /// Checkpoint or dataset schema did not match what this build expects.
    #[error("schema error: {0}")]
    Schema(String),

    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// Non-finite values, failed factorizations and the like.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// An operation that needs both classes got a single-class sample.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    /// A pipeline stage was invoked before its prerequisites exist.
    #[error("missing artifacts: {0}")]
    MissingArtifacts(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
