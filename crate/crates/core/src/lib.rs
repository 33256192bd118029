//! Limiting beliefs of a Bayesian learner who is dogmatic about the biases of
//! some information sources and learns the rest.

pub mod behavior;
pub mod cli;
pub mod error;
pub mod linalg;
pub mod klsolver;
pub mod learner;
pub mod report;
pub mod scenario;
pub mod sweep;

pub use error::{Error, Result};
