//! Guided deep kernel learning: exact and sparse Gaussian-process inference
//! with deep kernels whose uncertainty is calibrated against an
//! infinite-width network GP.

pub mod error;
pub mod gp;
pub mod harness;
pub mod kernels;
pub mod likelihoods;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod sparse;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
