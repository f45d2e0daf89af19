use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor extent did not match what the operation requires.
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, got {got}")]
    Dimension {
        op: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: extent {got} on axis {axis} is not a multiple of {factor}")]
    Divisibility {
        op: &'static str,
        axis: &'static str,
        factor: usize,
        got: usize,
    },

    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("batch norm `{0}` evaluated before its running statistics were initialized")]
    UninitializedStats(String),

    #[error("cross-entropy over zero scored pixels (every label is the ignore index)")]
    EmptyLoss,

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite gradient for parameter `{name}` ({count} bad entries)")]
    NonFiniteGradient { name: String, count: usize },

    #[error("tensor file format: {0}")]
    Format(String),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("could not satisfy scale coverage for class {class} ({name}) after {attempts} attempts")]
    Generation {
        class: usize,
        name: String,
        attempts: usize,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("mean IoU is undefined: no class has a non-zero denominator")]
    UndefinedMetric,

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
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn path(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Path {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint archive (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("checkpoint checksum mismatch")]
    Checksum,
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {found:?}, config demands {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("malformed checkpoint manifest: {0}")]
    Manifest(String),
}
