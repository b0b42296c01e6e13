//! Alternating (KMF) iteration for Cauchy problems of elliptic equations.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiments;
pub mod fem;
pub mod geometry;
pub mod kmf;
pub mod regularization;
pub mod sparse;
pub mod spectral;

pub use error::{Error, Result};
