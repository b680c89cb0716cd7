use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: io::Error },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] ember_core::error::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step}; last good checkpoint in {}", checkpoint.display())]
    NonFinite {
        epoch: usize,
        step: usize,
        checkpoint: PathBuf,
    },
}

impl From<ember_core::sim::SimError> for PipelineError {
    fn from(e: ember_core::sim::SimError) -> Self {
        PipelineError::Core(e.into())
    }
}

impl From<ember_core::tensor::TensorError> for PipelineError {
    fn from(e: ember_core::tensor::TensorError) -> Self {
        PipelineError::Core(e.into())
    }
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

pub(crate) fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, contents).map_err(io_err(path))
}
