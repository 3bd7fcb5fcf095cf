use thiserror::Error;

pub type Result<T, E = DiffError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range (size {bound})")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{0}")]
    Invalid(String),
}
