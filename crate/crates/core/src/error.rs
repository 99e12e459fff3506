use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Manifest or task-file content violates a schema rule.
    #[error("validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    /// The target could not be reached. Callers may retry.
    #[error("connection to {endpoint} failed: {reason}")]
    Connection { endpoint: String, reason: String },

    #[error("protocol error from service `{service}`: {reason}")]
    Protocol { service: String, reason: String },

    #[error("wire format error: {0}")]
    Wire(String),

    #[error("config error at {path}: field `{field}`: {reason}")]
    Config {
        path: String,
        field: String,
        reason: String,
    },

    #[error("coverage map size mismatch: {left} != {right}")]
    MapSize { left: usize, right: usize },

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("task `{task_id}` is leased to worker `{holder}`, not `{worker_id}`")]
    LeaseMismatch {
        task_id: String,
        holder: String,
        worker_id: String,
    },

    #[error("lease on task `{0}` expired")]
    LeaseExpired(String),

    #[error("task `{0}` is not claimed")]
    NotClaimed(String),

    #[error("backend: {0}")]
    Backend(String),

    #[error("instance failed to boot: {0}")]
    Boot(String),

    #[error("replay file corrupt at line {line}: {reason}")]
    ReplayCorrupt { line: usize, reason: String },

    #[error("not reproducible, nothing to minify")]
    NotReproducible,

    #[error("{0}")]
    Other(String),
}

impl Error {
    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Connection { .. })
    }
}
