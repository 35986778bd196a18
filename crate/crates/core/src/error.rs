use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid range: {0}")]
    InvalidRange(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("step {step} out of range 1..={steps}")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("index {index} out of range (bound {bound})")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("missing patch with flat index {0}")]
    MissingPatch(usize),
    #[error("duplicate patch with flat index {0}")]
    DuplicatePatch(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::ShapeMismatch(msg.into())
}
