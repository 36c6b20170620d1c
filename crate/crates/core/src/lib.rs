//! Clustering of multivariate tail dependence.
//!
//! Site-wise conditional extremes models are fitted under a Gaussian
//! residual working assumption, compared through the expected skew-geometric
//! Jensen–Shannon divergence of their conditional laws, and clustered with
//! PAM k-medoids.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod ce_fit;
pub mod cluster;
pub mod copulas;
pub mod dissim;
pub mod divergence;
pub mod error;
pub mod io;
pub mod linalg;
pub mod margins;
pub mod optim;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};
