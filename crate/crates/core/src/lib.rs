//! Differentially private distributed constrained optimization with a
//! Tikhonov-regularized primal-dual projection iteration.

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod checks;
pub mod cloudsim;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod privacy;
pub mod problem;
pub mod schedule;
pub mod solver;

pub use error::{Error, Result};
pub use linalg::Norm;
