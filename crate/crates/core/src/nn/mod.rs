//! Minimal reverse-mode substrate: layers with hand-written backward passes,
//! a sequential container, first-order optimizers and spectral normalization.

mod layers;
mod loss;
mod network;
mod optim;
pub mod spectral;

pub use layers::{LayerSpec, Mode};
pub use loss::{mae, mae_grad, mse, mse_grad, softplus, softplus_grad, MAE_TIE};
pub use network::{Grads, Network, Trace};
pub use optim::{Optimizer, OptimizerKind};
