use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} needs {expected} values, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: invalid argument: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("cross entropy: every position is ignored, loss is empty")]
    EmptyLoss,
    #[error("target index {index} out of range for {classes} classes")]
    TargetOutOfRange { index: usize, classes: usize },
    #[error("gradient check aborted: non-finite loss {value}")]
    NonFiniteLoss { value: f64 },
    #[error("refusing update: gradient for parameter `{param}` contains NaN")]
    NanGradient { param: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;
