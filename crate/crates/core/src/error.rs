//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T, E = GfkError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum GfkError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("softmax row {row} has every entry masked")]
    DegenerateRow { row: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("function is not deterministic: f(theta) gave {first} then {second}")]
    Determinism { first: f64, second: f64 },

    #[error("{what} out of range: {value} (limit {limit})")]
    Range { what: &'static str, value: usize, limit: usize },

    #[error("{neighbours} neighbours exceed capacity K={capacity}")]
    Capacity { neighbours: usize, capacity: usize },

    #[error("neighbour cache was built for model version {cache:016x}, parameters are {params:016x}")]
    StaleCache { cache: u64, params: u64 },

    #[error("neighbour cache storage failed: {0}")]
    CacheIo(#[source] std::io::Error),

    #[error("empty batch")]
    EmptyBatch,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite gradient for parameter `{name}` at step {step}")]
    NonFiniteGrad { name: String, step: u64 },

    #[error("training diverged at step {step}: loss {loss} stayed above 10x the initial {initial}")]
    Divergence { step: u64, loss: f64, initial: f64 },

    #[error("index {index} out of range for {len} candidates")]
    Index { index: usize, len: usize },

    #[error("unknown node id {0}")]
    UnknownNode(u64),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("instance {index}: {source}")]
    Instance {
        index: usize,
        #[source]
        source: Box<GfkError>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl GfkError {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        GfkError::Dimension { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GfkError::Io { path: path.into(), source }
    }
}
