use thiserror::Error;

use crate::distributions::DistError;
use crate::ode::OdeError;
use crate::tensor::TensorError;

/// Errors raised while building, running or training process models.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid context: {0}")]
    Context(String),
    #[error("invalid configuration `{key}`: {detail}")]
    Config { key: String, detail: String },
    #[error("invalid data: {0}")]
    Data(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

impl ModelError {
    pub fn config(key: &str, detail: impl Into<String>) -> Self {
        ModelError::Config {
            key: key.to_string(),
            detail: detail.into(),
        }
    }

    /// True for failures caused by numerics rather than bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            ModelError::Diverged { .. } | ModelError::Ode(OdeError::NonFinite { .. })
        )
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;
