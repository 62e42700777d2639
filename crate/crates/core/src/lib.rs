//! Quantum histories of a pair of coupled spin ladders: event projectors,
//! history probabilities, consistency and Markovianity measures, the
//! classical stochastic process they induce, and typicality estimators.

pub use ndarray_linalg::c64;

pub mod cli;
pub mod error;
pub mod histories;
pub mod operator;
pub mod rng;
pub mod spectral;
pub mod spin_model;
pub mod stochastic;
pub mod typicality;

pub use error::{Error, Result};
