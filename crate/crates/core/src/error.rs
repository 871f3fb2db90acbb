use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch in `{op}`: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by `{op}` at node {node}")]
    NonFinite { op: &'static str, node: usize },

    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("near-singular covariance (det = {det:e})")]
    SingularCovariance { det: f64 },

    #[error("unknown agent id {0}")]
    UnknownAgent(u32),

    #[error("agent {0} has no valid history")]
    EmptyHistory(u32),

    #[error("agent {agent} at ({x:.2}, {y:.2}) lies outside the raster extent")]
    OutOfExtent { agent: u32, x: f64, y: f64 },

    #[error("unsupported {what} schema_version {found} (expected {expected})")]
    Schema {
        what: &'static str,
        found: u32,
        expected: u32,
    },

    #[error("{path}:{line}: {msg}")]
    Malformed {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("incompatible: {0}")]
    Incompatible(String),

    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
