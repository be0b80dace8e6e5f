//! Dense tensors, a reverse-mode tape, small neural layers and Adam.

#[cfg(test)]
mod gradcheck;
mod graph;
pub mod linalg;
mod loss;
mod nn;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, NodeId};
pub use loss::{beta_gaussian_nll, gaussian_nll, gaussian_nll_value};
pub use nn::{
    dropout_mask, Activation, BatchNorm, BatchStats, Dense, Mlp, MlpConfig, MlpOutput, Mode, BN_EPS,
    BN_MOMENTUM,
};
pub use optim::{AdamConfig, AdamState};
pub use params::{Gradients, ParamId, ParamStore};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdError {
    #[error("dimension error: {0}")]
    Shape(String),
    #[error("matrix is not positive definite (pivot {pivot} = {value})")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("cholesky failed after jitter escalation to {jitter:e}: {reason}")]
    CholeskyFailed { jitter: f64, reason: String },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("optimizer state poisoned: {0}")]
    PoisonedState(String),
    #[error("{0}")]
    Contract(String),
}
