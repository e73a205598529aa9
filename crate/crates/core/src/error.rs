use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("response contains no fenced code block")]
    NoCodeBlock,
    #[error("reward error: {0}")]
    Reward(String),
    #[error("unknown policy state `{0}`")]
    State(String),
    #[error("action index {index} out of range for slot of size {len}")]
    Index { index: usize, len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("batch error: {0}")]
    Batch(String),
    #[error("stale batch: entry version {entry} outside [{min}, {max}]")]
    Staleness { entry: u64, min: u64, max: u64 },
    #[error("update skipped: {0}")]
    Update(String),
    #[error("liveness: {0}")]
    Liveness(String),
    #[error("mode error: {0}")]
    Mode(String),
    #[error("no valid solution")]
    NoValidSolution,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("task `{task}`: {reason}")]
    Task { task: String, reason: String },
    #[error("backend: {0}")]
    Backend(String),
    #[error("instrumenter: {0}")]
    Instrumenter(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn path(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Path {
            path: path.into(),
            source,
        }
    }
}
