use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MoffoError {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),

    #[error("shape mismatch: expected {expected}, got {actual} ({context})")]
    ShapeMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("oracle failure: {0}")]
    Oracle(String),
}

pub type Result<T> = std::result::Result<T, MoffoError>;

pub(crate) fn check_len(expected: usize, actual: usize, context: &'static str) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(MoffoError::ShapeMismatch {
            expected,
            actual,
            context,
        })
    }
}
