use thiserror::Error;

/// Errors produced by the numerical core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: {reason}")]
    InvalidShape { op: &'static str, reason: String },

    #[error("{op}: index {index} out of range (bound {bound})")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("{op}: length {len} is not a power of two")]
    NotPowerOfTwo { op: &'static str, len: usize },

    #[error("{op}: length mismatch ({left} vs {right})")]
    LengthMismatch {
        op: &'static str,
        left: usize,
        right: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("graph was recorded without gradient tracking")]
    NoGradGraph,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss {loss}, lr {lr}, grad norm {grad_norm}")]
    Diverged {
        step: usize,
        loss: f64,
        lr: f64,
        grad_norm: f64,
    },

    #[error("checkpoint field `{field}`: {reason}")]
    Checkpoint { field: String, reason: String },

    #[error("corpus: {0}")]
    Corpus(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn checkpoint(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Checkpoint {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
