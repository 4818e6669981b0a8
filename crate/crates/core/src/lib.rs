//! Latent-vector training of neural networks.
//!
//! Instead of optimizing a target network's parameters directly, a compact
//! trainable latent vector is pushed through a fixed, orthogonally
//! initialized matrix that the latent itself modulates; the result is the
//! target's full parameter tensor. Only the latent (and a handful of loss
//! coefficients) receive gradients, which cuts trainable parameters by two
//! to three orders of magnitude while the target network runs forward-only.
//!
//! The crate provides the tensor/autodiff engine this needs, the target
//! architectures, the generator, the composite training loss, a training
//! and evaluation harness with checkpointing, dataset loaders, a parameter
//! snapshot probe with PCA, and the `mapnet` CLI.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod finetune;
pub mod kernels;
pub mod loss;
pub mod mapping;
pub mod optim;
pub mod probe;
pub mod rng;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
