//! Sparse adversarial training with a condition-number constraint.
//!
//! A small dense-tensor neural network library with binary weight masks,
//! first-order attacks, saliency pruning, condition-number and Lipschitz
//! diagnostics, and a two-phase trainer: prune a reference network by
//! adversarial Taylor saliency, then retrain the masked network on
//! `L_CE(x_adv) + λ·Σ log(τ + ‖W̃‖_F²)`.

pub mod attacks;
pub mod checkpoint;
pub mod data;
mod error;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod pruning;
pub mod report;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
