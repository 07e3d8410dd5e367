//! Bayesian probabilistic numerical methods.
//!
//! The crate is organised around the objects of a Bayesian numerical
//! computation: a prior over an unknown function expressed as a truncated
//! Chebyshev series ([`chebbasis`], [`seriesprior`]), the information
//! extracted from it ([`infoops`]), closed-form Gaussian conditioning
//! ([`conjugate`]), Monte Carlo approximation of the conditional distribution
//! ([`disintegration`]) and of the model evidence ([`evidence`]),
//! composition of several methods into a pipeline ([`pipeline`]), and
//! decision-theoretic risk calculations ([`decision`]). [`experiments`] holds
//! the configuration schema and the batch runners used by the command line.

pub mod chebbasis;
pub mod conjugate;
pub mod decision;
pub mod disintegration;
pub mod error;
pub mod evidence;
pub mod experiments;
pub mod infoops;
pub mod pipeline;
pub mod rng;
pub mod seriesprior;

pub use error::{Error, Result};
