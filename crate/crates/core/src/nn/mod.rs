//! Minimal neural-network stack: ELU MLPs with exact reverse-mode gradients
//! and input-gradient penalties, a diagonal Gaussian policy, Adam, and a
//! running observation normalizer.

mod mlp;
mod normalizer;
mod optim;
mod policy;

pub use mlp::{elu, elu_grad, param_count, GradTape, GradientPenalty, Mlp};
pub use normalizer::RunningNorm;
pub use optim::{clip_grad_norm, Adam};
pub use policy::GaussianPolicy;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("gradient tape already consumed")]
    TapeConsumed,
    #[error("network has {0} outputs; a scalar output is required")]
    NonScalarOutput(usize),
}
