//! Reference-shifted distributionally robust risk minimization and the
//! DRRho-CLIP contrastive trainer, at desk scale.

pub mod baselines;
pub mod cli;
pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiments;
pub mod format;
pub mod risk;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
