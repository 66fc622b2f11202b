use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("provider transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },

    #[error("provider returned status {status}: {body}")]
    Provider { status: u16, body: String },

    #[error("unrecorded request {hash}")]
    UnrecordedRequest { hash: String },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("missing dependency: stage `{stage}` has not produced {artifact}")]
    MissingDependency { stage: String, artifact: String },

    #[error("stale dependency: stage `{stage}` is older than its inputs (re-run it or pass --force)")]
    StaleDependency { stage: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` finished with {count} warning(s) and --strict is set")]
    Warnings { stage: String, count: usize },

    #[error("workspace is locked by another stage ({0})")]
    Locked(PathBuf),
}

impl Error {
    /// Missing or stale upstream artifacts, as opposed to a failure inside
    /// a stage.
    pub fn is_dependency(&self) -> bool {
        matches!(self, Error::MissingDependency { .. } | Error::StaleDependency { .. })
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
