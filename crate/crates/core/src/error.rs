use thiserror::Error;

/// Errors raised by the laboratory.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum LabError {
    #[error("non-finite logit in weight row {row} (token {row}) at context {context:?}")]
    NonFiniteLogits { row: usize, context: Vec<usize> },

    #[error("token id {token} is outside the vocabulary of size {vocab}")]
    TokenOutOfVocabulary { token: usize, vocab: usize },

    #[error("non-finite value in {what} at group {group}, response {response}, token {token}")]
    NonFiniteLoss {
        what: &'static str,
        group: usize,
        response: usize,
        token: usize,
    },

    #[error("non-finite gradient at step {step} (ratio explosion: max ratio {max_ratio})")]
    NonFiniteGradient { step: usize, max_ratio: f64 },

    #[error("enumeration budget exceeded: {required} > {budget}")]
    BudgetExceeded { required: f64, budget: f64 },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for LabError {
    fn from(e: std::io::Error) -> Self {
        LabError::Io(e.to_string())
    }
}

impl From<csv::Error> for LabError {
    fn from(e: csv::Error) -> Self {
        LabError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
