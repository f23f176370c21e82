pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod embeddings;
pub mod error;
pub mod harness;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod uipn;
pub mod urmn;

#[cfg(test)]
pub(crate) mod reference;

pub use error::{Error, Result};
pub use tensor::Tensor;
