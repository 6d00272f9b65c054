//! Random-coefficients logit demand with Bertrand-Nash pricing: synthetic
//! data generation, full-information maximum likelihood, a two-step GMM
//! comparator, and a Monte Carlo harness.

pub mod cli;
pub mod equilibrium;
pub mod gmm;
pub mod error;
pub mod inversion;
pub mod io;
pub mod likelihood;
pub mod linalg;
pub mod model;
pub mod montecarlo;
pub mod optimize;
pub mod quadrature;
pub mod rng;

#[cfg(test)]
mod testing;

pub use error::{Error, ErrorKind, Result};
