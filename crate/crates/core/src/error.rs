use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: length mismatch ({left} vs {right})")]
    LengthMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },
    #[error("{op}: source id {source_id} has no counterpart on the other side")]
    UnmatchedSource { op: &'static str, source_id: u64 },
    #[error("{op}: row {row} has norm {norm}, expected unit norm")]
    NotNormalized { op: &'static str, row: usize, norm: f64 },
    #[error("non-finite loss in component {component} at step {step}")]
    NonFiniteLoss { component: &'static str, step: u64 },
    #[error("scene: {0}")]
    Scene(String),
    #[error("augmentation provider failed: {0}")]
    Provider(String),
    #[error("config line {line}: {msg}")]
    Config { line: usize, msg: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::Invalid { op, msg: msg.into() }
}
