//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    #[error("invalid score {0}: must lie in [0, 1]")]
    InvalidScore(f64),

    #[error("category `{0}` already present in the label space")]
    DuplicateCategory(String),

    #[error("alias `{alias}` already maps to `{existing}`")]
    AliasConflict { alias: String, existing: String },

    #[error("unknown category: {0}")]
    UnknownCategory(String),

    #[error("unknown image: {0}")]
    UnknownImage(String),

    #[error("duplicate image id: {0}")]
    DuplicateImage(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("zero or non-finite embedding vector")]
    InvalidVector,

    #[error("category name must not be empty")]
    EmptyCategory,

    #[error("embedding store is empty")]
    EmptyStore,

    #[error("adapter `{adapter}` unavailable: {reason}")]
    AdapterUnavailable { adapter: String, reason: String },

    #[error("training set has no novel labels and no corrections")]
    EmptyTrainingSet,

    #[error("precision undefined for category {0}: no labels")]
    UndefinedPrecision(u32),

    #[error("invalid count: {0}")]
    InvalidCount(String),

    #[error("revision conflict: expected {expected}, current {current}")]
    RevisionConflict { expected: u64, current: u64 },

    #[error("invalid transition: {0}")]
    InvalidTransition(String),

    #[error("unknown cost kind: {0}")]
    UnknownKind(String),

    #[error("corrupt manifest: {0}")]
    CorruptManifest(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("no run at {0}")]
    UnknownRun(String),

    #[error("interrupted: {0}")]
    Interrupted(String),

    #[error("stage not runnable: {0}")]
    NotRunnable(String),

    #[error("run is locked by another writer: {0}")]
    Locked(PathBuf),

    #[error("failed to bind {addr}: {reason}")]
    BindFailure { addr: String, reason: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn adapter(adapter: &str, reason: impl Into<String>) -> Self {
        Error::AdapterUnavailable {
            adapter: adapter.to_string(),
            reason: reason.into(),
        }
    }
}
