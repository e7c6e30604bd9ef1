//! Training engine for learning under noisy labels.
//!
//! The crate bundles a small reverse-mode autodiff engine, residual and MLP
//! classifiers, cross-entropy and early-learning regularized losses, SGD with
//! momentum plus sharpness-aware minimization, label-noise tooling, and an
//! experiment harness that writes per-epoch memorization diagnostics.

pub mod autodiff;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod harness;
pub mod loss;
pub mod model;
pub mod optim;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
