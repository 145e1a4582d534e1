//! Bayesian neural networks built from ordinary network descriptions.
//!
//! A [`network::Network`] declares parameter sites. Priors turn some of them
//! into random variables, a guide approximates their posterior, and a
//! likelihood ties network outputs to data. Inference runs either by
//! stochastic variational inference ([`svi`]) or Hamiltonian Monte Carlo
//! ([`mcmc`]).

pub mod error;
pub mod tensor;
pub mod distributions;
pub mod network;
pub mod priors;
pub mod guides;
pub mod likelihoods;
pub mod svi;
pub mod mcmc;
pub mod vcl;
pub mod metrics;
pub mod data;
pub mod checkpoint;

pub use error::{Error, Result};
pub use tensor::Tensor;
