use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LmiError {
    #[error("problem has no decision matrix (dim = 0)")]
    EmptyProblem,
    #[error("strictness margin must be positive and finite, got {0}")]
    InvalidMargin(f64),
    #[error("constraint '{label}' has a non-symmetric term")]
    NonSymmetric { label: String },
    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: String,
        expected: usize,
        found: usize,
    },
    #[error("unknown scalar variable index {0}")]
    UnknownScalar(usize),
    #[error("invalid solver option: {0}")]
    InvalidOption(String),
    #[error("numerical breakdown after {iterations} iterations: {reason}")]
    NumericalBreakdown { iterations: usize, reason: String },
}
