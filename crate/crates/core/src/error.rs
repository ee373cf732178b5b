use thiserror::Error;

/// A problem evaluator produced a non-finite or malformed result.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("evaluation of {function} failed at {point:?}: {detail}")]
pub struct EvaluationError {
    pub function: String,
    pub point: Vec<f64>,
    pub detail: String,
}

impl EvaluationError {
    pub fn new(function: impl Into<String>, point: Vec<f64>, detail: impl Into<String>) -> Self {
        Self {
            function: function.into(),
            point,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),

    #[error("dimension mismatch in {what}: expected {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("invalid problem dimensions: {0}")]
    InvalidDims(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("penalty parameter must be positive and finite, got {0}")]
    InvalidPenalty(f64),

    #[error("point is not approximately stationary: inconsistent indices {0:?}")]
    InconsistentPoint(Vec<String>),

    #[error("unknown problem {0:?}")]
    UnknownProblem(String),

    #[error("i/o or serialization failure: {0}")]
    Io(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            actual,
        })
    }
}
