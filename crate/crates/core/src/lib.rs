//! Sparse variational inference for (grouped) mixed-effect Gaussian-process
//! multi-task regression.

pub mod baselines;
pub mod datagen;
pub mod error;
pub mod grouped;
pub mod harness;
pub mod kernels;
pub mod linalg;
pub mod metrics;
pub mod optim;
pub mod sparse_core;
pub mod special;

pub use error::{Error, Result};
