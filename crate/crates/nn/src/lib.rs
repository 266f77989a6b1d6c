//! Minimal CPU neural-network toolkit: NCHW tensors, convolution, batch
//! normalization, pooling, the full-resolution residual network and SGD.

pub mod checkpoint;
pub mod frrn;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod param;
pub mod tensor;

pub use frrn::{Frrn, FrrnConfig};
pub use layers::Mode;
pub use optim::Sgd;
pub use param::{Module, Param};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("non-finite values: {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
