use thiserror::Error;

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range in {op} (size {size})")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },

    #[error("invalid tensor: {0}")]
    Invalid(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
}
