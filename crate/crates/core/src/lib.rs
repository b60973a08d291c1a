//! Fast multitask Gaussian process regression and Bayesian cubature on
//! low-discrepancy designs.

pub mod bench;
pub mod cubature;
pub mod dense;
pub mod error;
pub mod fast_gram;
pub mod gp;
pub mod jitter;
pub mod kernels;
pub mod ld;
pub mod problems;
pub mod scalar;
pub mod transforms;

pub use error::{Error, Result};
