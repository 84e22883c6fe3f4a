//! Minimal dense/conv/recurrent network substrate with manual backprop.
//!
//! Just enough machinery to express the Q-network and the stop-step
//! regressors: fixed layer sequences (no general autograd graph), explicit
//! forward caches so inference can run lock-free from many threads, Adam
//! with bias correction, parameter copying for target-network sync, and a
//! central-difference gradient checker that every layer kind is verified
//! against.
//!
//! All arithmetic is `f64`; caches are reusable scratch buffers so the hot
//! path allocates nothing after warm-up.

mod adam;
mod check;
mod checkpoint;
mod network;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use check::{check_gradients, GradCheckReport, GradSample};
pub use checkpoint::{load_network, load_network_expecting, save_network, CheckpointMeta};
pub use network::{
    copy_params, CellKind, ForwardCache, LayerSpec, Network, NetworkSpec,
};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("network specs differ")]
    SpecMismatch,
    #[error("backward called without a cached forward pass")]
    NoForwardCache,
    #[error("network spec has no layers")]
    EmptySpec,
    #[error("recurrent layer misuse: {0}")]
    BadRecurrent(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// Regression losses used across the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Mean absolute error.
    L1,
    /// Mean squared error.
    Mse,
}

/// Loss value and its gradient with respect to the prediction.
pub fn loss_and_grad(kind: LossKind, pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor), NnError> {
    if pred.shape() != target.shape() {
        return Err(NnError::ShapeMismatch(format!(
            "loss: prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = 0.0;
    for (i, (p, t)) in pred.data().iter().zip(target.data()).enumerate() {
        let diff = p - t;
        match kind {
            LossKind::Mse => {
                loss += diff * diff;
                grad.data_mut()[i] = 2.0 * diff / n;
            }
            LossKind::L1 => {
                loss += diff.abs();
                grad.data_mut()[i] = diff.signum() * (diff != 0.0) as i32 as f64 / n;
            }
        }
    }
    Ok((loss / n, grad))
}
