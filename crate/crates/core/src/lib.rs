//! Cyclic reverse generator laboratory.
//!
//! Train a small generator adversarially, learn its inverse encoder with the two-step
//! cyclic objective (latent MSE then image MAE), derive attribute directions from
//! reference pairs, edit latents, and score everything against an analytic synthetic
//! attribute oracle and perceptual hashes.

pub mod checkpoint;
pub mod crg;
pub mod editing;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod gan;
pub mod gbt;
pub mod image;
pub mod metrics;
pub mod models;
pub mod stats;
pub mod synthdata;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
