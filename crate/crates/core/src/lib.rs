//! Longitudinal latent-variable models with Gaussian-process priors,
//! structured missingness and a Gaussian-process point process over the
//! observation times.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod datagen;
pub mod error;
pub mod gp_prior;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod nets;
pub mod optim;
pub mod predict;
pub mod special;
pub mod tape;
pub mod tpp;

pub use error::{Error, Result};
