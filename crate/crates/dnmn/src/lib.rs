//! dnmn learns dependency networks from discrete data, converts them in
//! closed form into log-linear Markov networks with conjunctive features,
//! and evaluates the results against a pseudo-likelihood weight-learning
//! baseline. Inference is Rao-Blackwellized Gibbs sampling, which runs over
//! both model kinds.
//!
//! Modules follow the pipeline: [`model`] holds the core representations and
//! exact small-model oracles, [`cpd`] learns per-variable conditionals,
//! [`convert`] performs the closed-form conversion with base-instance and
//! ordering averaging, [`weights`] is the weight-learning baseline,
//! [`inference`] the sampler and metrics, and [`io`]/[`cli`] the file formats
//! and command-line surface.

pub mod cli;
pub mod convert;
pub mod cpd;
pub mod error;
pub mod inference;
pub mod io;
pub mod model;
pub mod weights;

#[cfg(test)]
pub(crate) mod testfix;

pub use error::{Error, Result};
