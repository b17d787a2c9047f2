use std::path::PathBuf;

use clex_core::checkpoint::CheckpointError;
use clex_core::ode::OdeError;
use clex_core::{ModelError, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("corpus not found: {}", .0.display())]
    CorpusNotFound(PathBuf),
    #[error("corpus is empty: {}", .0.display())]
    EmptyCorpus(PathBuf),
    #[error("corpus split has {have} tokens, need at least {need}")]
    CorpusTooShort { need: usize, have: usize },
    #[error("validation split is empty; lower `split` to evaluate")]
    EmptyValidation,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("checkpoint does not match config: {0}")]
    Incompatible(String),
    #[error("non-finite loss {loss} at step {step}")]
    NonFinite { step: usize, loss: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl HarnessError {
    /// Process exit code: 2 for bad input, 3 for incompatible artifacts,
    /// 4 for numerical aborts.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Incompatible(_) => 3,
            HarnessError::NonFinite { .. } => 4,
            HarnessError::Tensor(TensorError::NonFinite(_)) => 4,
            HarnessError::Ode(OdeError::Tensor(TensorError::NonFinite(_))) => 4,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| HarnessError::Io { path, source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>) -> impl FnOnce(serde_json::Error) -> Self {
        let path = path.into();
        move |source| HarnessError::Json { path, source }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
