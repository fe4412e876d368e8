use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: empty input")]
    Empty { op: &'static str },

    #[error("non-finite value in {op}")]
    NonFinite { op: &'static str },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("out-of-order step: expected position {expected}, got {got}")]
    OutOfOrder { expected: usize, got: usize },

    #[error("overlapping attention segments at key position {0}")]
    OverlappingSegments(usize),

    #[error("missing forward record: {0}")]
    MissingRecord(String),

    #[error("spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("container format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::ShapeMismatch { op, detail: detail.into() }
    }

    pub fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument { op, detail: detail.into() }
    }
}
