//! Bayesian multiple index models: exposures are grouped into indices, each
//! index is a weighted sum of its exposures, and the outcome depends on the
//! indices through a Gaussian process. Weight priors range from unconstrained
//! to fully fixed, so external knowledge about relative potency can be
//! encoded at the strength it deserves.

// Negated comparisons deliberately treat NaN as invalid.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod config;
pub mod error;
pub mod harness;
pub mod io;
pub mod kernels;
pub mod linalg;
pub mod model;
pub mod posterior;
pub mod priors;
pub mod sampler;
pub mod stats;

pub use error::{BmimError, Result};
