use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },

    #[error("backward: no derivative rule recorded for op `{op}`")]
    UnsupportedOp { op: String },

    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NonScalar { op: &'static str, shape: Vec<usize> },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("training diverged at step {step}: non-finite {what}")]
    Diverged { step: usize, what: String },

    #[error("task index {index} out of range for {count} tasks")]
    TaskIndex { index: usize, count: usize },

    #[error("{0}: empty mask")]
    EmptyMask(&'static str),

    #[error("baseline metric for task `{task}` is zero")]
    ZeroBaseline { task: String },

    #[error("parameter `{0}` has no value (store not materialized)")]
    Unmaterialized(String),

    #[error("config: {0}")]
    Config(String),

    #[error("tensor format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
