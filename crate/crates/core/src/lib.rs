//! Guided visual question generation at desk scale.

pub mod autograd;
pub mod harness;
pub mod concepts;
pub mod metrics;
pub mod models;
pub mod neural;
pub mod params;
pub mod sampling;
pub mod realism;
pub mod scalar;
pub mod tensor;
pub mod vocab;
pub mod world;

pub use autograd::{AttentionSpec, Gradients, Graph, Segment, Var};
pub use params::{Adam, AdamConfig, ParamId, ParamStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Errors surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum GvqgError {
    #[error("invalid configuration: `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
}

impl GvqgError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T, E = GvqgError> = std::result::Result<T, E>;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
