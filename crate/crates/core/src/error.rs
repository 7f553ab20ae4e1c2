use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeltError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("class label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("{path}:{line}: expected {expected} values, found {found}")]
    Dimension {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("duplicate message_id `{0}`")]
    DuplicateMessage(String),

    #[error("unknown message_id `{0}`")]
    UnknownMessage(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("mask plan does not match chunk: {0}")]
    PlanMismatch(String),

    #[error("slot {0} is not a real message")]
    NotReal(usize),

    #[error("unknown stance target `{0}`")]
    UnknownTarget(String),

    #[error("unknown stance label `{0}`")]
    UnknownLabel(String),

    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint truncated: expected {expected} payload bytes, found {found}")]
    CheckpointTruncated { expected: usize, found: usize },

    #[error("checkpoint manifest mismatch: {0}")]
    CheckpointManifest(String),

    #[error("checkpoint header: {0}")]
    CheckpointHeader(String),

    #[error("ids missing from predictions: {0:?}")]
    MissingIds(Vec<String>),
}

impl MeltError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MeltError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by training numerics rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, MeltError::NonFinite { .. })
    }
}

pub type Result<T> = std::result::Result<T, MeltError>;
