//! Binary classifiers that output Beta-distributed evidence instead of a
//! point probability, so every prediction carries an uncertainty `û = 2/(α+β)`.
//! The uncertainty drives sample rejection at inference time and the removal
//! of suspect training samples before retraining.

pub mod data;
pub mod error;
pub mod eval;
pub mod evidential;
pub mod net;
pub mod rng;
pub mod sampling;
pub mod specfun;

pub use error::{Error, Result};
