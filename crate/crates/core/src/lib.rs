pub mod cascade;
pub mod conditioner;
pub mod data;
mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod rvq;
pub mod transformer;

pub use error::{Error, Result};
