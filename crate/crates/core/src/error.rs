use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid hierarchy: {0}")]
    InvalidHierarchy(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid level slices: {0}")]
    InvalidSlices(String),

    #[error("dataset is already bias-augmented")]
    AlreadyAugmented,

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("singular value decomposition did not converge ({0})")]
    SvdFailed(String),

    #[error("decomposition has no eigenvalues for the input correlation (inputs do not commute with targets)")]
    MissingEigenvalues,

    #[error("decomposition has no OCS mode")]
    MissingOcsMode,

    #[error("infeasible network configuration: {0}")]
    InfeasibleNetwork(String),

    #[error("training diverged at step {step}: loss {loss:e} exceeds {limit:e}")]
    Diverged { step: usize, loss: f64, limit: f64 },

    #[error("network has no {0} bias")]
    MissingBias(&'static str),

    #[error("size guard: {what} has {size} entries, limit is {limit}")]
    SizeGuard {
        what: &'static str,
        size: usize,
        limit: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid index set: {0}")]
    InvalidIndexSet(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_mismatch(
    context: &'static str,
    expected: impl ToString,
    actual: impl ToString,
) -> Error {
    Error::DimensionMismatch {
        context,
        expected: expected.to_string(),
        actual: actual.to_string(),
    }
}
