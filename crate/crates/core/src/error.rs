use thiserror::Error;

use crate::sim::SimError;
use crate::tensor::TensorError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("retrieval error: {0}")]
    Retrieval(String),
}

pub type Result<T> = std::result::Result<T, Error>;
