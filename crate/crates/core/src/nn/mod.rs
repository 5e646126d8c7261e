//! Minimal CPU neural-network kernel: conv, dense and LSTM layers with
//! hand-written reverse-mode gradients, MSE loss, Adam, and a checkpoint
//! format.

pub mod checkpoint;
pub mod gemm;
pub mod layers;
pub mod loss;
pub mod lstm;
pub mod params;
pub mod tensor;

use thiserror::Error;

pub use layers::{conv2d_forward, Conv2d, Linear, Maps};
pub use loss::mse_loss;
pub use lstm::{lstm_step, Lstm, LstmState};
pub use params::{adam_step, AdamConfig, Grads, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NumericFault(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
