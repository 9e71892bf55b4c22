use thiserror::Error;

/// Errors raised by the filtering library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    Dimension {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error("requested rank {rank} exceeds the admissible maximum {max}")]
    RankTooLarge { rank: usize, max: usize },

    #[error("dense computation on n = {n} exceeds the configured cap {cap}; use the low-rank path")]
    DenseCapExceeded { n: usize, cap: usize },

    #[error("observation times must be strictly increasing (t[{index}] = {time} after {previous})")]
    NonMonotoneTimes { index: usize, time: f64, previous: f64 },

    #[error("correction branch precondition violated: {0}")]
    BranchPrecondition(String),

    #[error("inconsistent correction inputs: gain singular value {0} exceeds one")]
    InconsistentGain(f64),

    #[error("structured transition disagrees with the dense exponential (relative error {0:e})")]
    TransitionMismatch(f64),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_finite<'a, I>(values: I, context: &str) -> Result<()>
where
    I: IntoIterator<Item = &'a f64>,
{
    if values.into_iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context.to_string()))
    }
}
