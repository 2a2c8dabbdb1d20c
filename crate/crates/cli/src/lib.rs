//! Configuration, checkpoint persistence, staged training and the
//! evaluation harness behind the `mvq` binary.

pub mod artifacts;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod harness;
pub mod train;

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mvq_core::Error),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("bad checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("{stage} checkpoint required but not found at {}", path.display())]
    Dependency { stage: &'static str, path: PathBuf },
}

impl From<mvq_tensor::TensorError> for CliError {
    fn from(e: mvq_tensor::TensorError) -> Self {
        CliError::Core(e.into())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
