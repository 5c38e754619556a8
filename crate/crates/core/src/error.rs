use thiserror::Error;

/// Errors raised by the library. Every variant is an input error: the
/// caller handed over data or parameters that violate an operation's
/// preconditions.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("length mismatch in {context}: expected {expected}, found {found}")]
    LengthMismatch {
        context: String,
        expected: usize,
        found: usize,
    },

    #[error("empty inactive set: no calibration row has label 0")]
    EmptyInactiveSet,

    #[error("missing predictor scores for {0}")]
    MissingScores(&'static str),

    #[error("invalid index {index} (pooled size {size})")]
    InvalidIndex { index: usize, size: usize },

    #[error("duplicate test position {0}")]
    DuplicateIndex(usize),

    #[error("score {value} outside [0, 1] is invalid for the log-likelihood-ratio statistic")]
    ScoreOutOfRange { value: f64 },

    #[error("weight must be positive and finite, got {value} ({context})")]
    NonPositiveWeight { context: String, value: f64 },

    #[error("{subsets} subsets exceed the enumeration cap of {cap}; use the randomized p-value")]
    EnumerationCapExceeded { subsets: u128, cap: u128 },

    #[error("need at least {folds} points for {folds}-fold cross-validation, got {points}")]
    TooFewPoints { points: usize, folds: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidParameter(msg.into())
}
