use alloc::string::String;

/// Errors raised by the core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("phase {phase} diverged at step {step}: {detail}")]
    Divergence {
        phase: &'static str,
        step: usize,
        detail: String,
    },
    #[error("missing prerequisite checkpoint for phase {0}")]
    MissingPrerequisite(&'static str),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("attempted to update frozen parameter `{0}`")]
    FrozenUpdate(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn param(msg: impl Into<String>) -> Error {
    Error::Param(msg.into())
}

pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
