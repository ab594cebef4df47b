//! Differentially private federated cubic-regularized Newton learning at
//! desk scale: loss-model oracles, a random-k sparsifier, a calibrated
//! Gaussian privacy accountant, the noisy local cubic solver, federation
//! orchestration with a first-order baseline, and an experiment harness.

pub mod config;
pub mod dataio;
pub mod error;
pub mod experiment;
pub mod fedcore;
pub mod gmsolver;
pub mod linalg;
pub mod model;
pub mod privacy;
pub mod rng;
pub mod sparsify;

pub use error::{Error, Result};
