use mvq_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{field} out of range: {value}")]
    OutOfRange { field: &'static str, value: String },
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input too short: {len} frames, need at least {min}")]
    InputTooShort { len: usize, min: usize },
    #[error("corrupt token {index} at layer {layer}, position {pos} (codebook size {k})")]
    CorruptToken {
        layer: usize,
        pos: usize,
        index: usize,
        k: usize,
    },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("{0} outside [0, 1]")]
    Domain(f64),
    #[error("requested {requested} tokens, model supports at most {max}")]
    Length { requested: usize, max: usize },
    #[error("missing component: {0}")]
    ComponentMissing(String),
    #[error("{stage} checkpoint required but not found at {path}")]
    Dependency { stage: &'static str, path: String },
    #[error("{0}")]
    Metric(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn format_err(what: &'static str, msg: impl Into<String>) -> Error {
    Error::Format {
        what,
        msg: msg.into(),
    }
}
