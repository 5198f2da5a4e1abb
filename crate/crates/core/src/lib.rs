//! Stochastic aggregated load model with progressive tripping, and
//! sequential Bayesian estimation of its parameters.

pub mod analysis;
pub mod error;
pub mod likelihood;
pub mod model;
pub mod rng;
pub mod sampler;
pub mod scenario;

pub use error::{Error, Result};
