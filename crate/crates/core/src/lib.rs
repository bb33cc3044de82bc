//! Bayesian model averaging of Laplace-approximated latent Gaussian models
//! over hyperparameters sampled by an outer Metropolis-Hastings chain.

pub mod bma;
pub mod dismap;
pub mod econ;
pub mod error;
pub mod gmrf;
pub mod graphs;
pub mod io;
pub mod laplace;
pub mod lgm;
pub mod mh;
pub mod oracle;
pub mod spmat;

pub use error::{Error, Result};
