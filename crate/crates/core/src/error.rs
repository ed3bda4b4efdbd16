use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("axis {axis} out of range for rank {rank}")]
    Axis { axis: usize, rank: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("value does not belong to this tape")]
    ForeignValue,

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("row {row} has no unmasked entries")]
    EmptyRow { row: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("cholesky factorization failed with jitter up to {jitter:e}")]
    Cholesky { jitter: f64 },

    #[error("explicit integration became unstable at step {step} (t = {time})")]
    Unstable { step: usize, time: f64 },

    #[error("retry budget of {retries} exhausted while sampling a stable trajectory")]
    RetryBudget { retries: usize },

    #[error("imaginary residue {residue:e} exceeds tolerance in inverse transform")]
    ImaginaryResidue { residue: f64 },

    #[error("linear solve failed: {0}")]
    Solve(String),

    #[error("non-finite training loss at step {step} on dataset {dataset}")]
    TrainingDiverged { step: usize, dataset: usize },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    pub(crate) fn invalid(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }
}
