use thiserror::Error;

/// Unified error type for the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },

    #[error("dimension error: {0}")]
    Dims(String),

    #[error("spatial extents must be powers of two, got {0}x{1}")]
    NotPowerOfTwo(usize, usize),

    #[error("expected a {expected} tensor, got {got}")]
    KindMismatch { expected: &'static str, got: &'static str },

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("graph already consumed by backward; run a new forward pass")]
    GraphConsumed,

    #[error("backward requires a scalar output, got {0} elements")]
    NotScalar(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("tensor file: {0}")]
    Format(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("training diverged: non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
