//! Derivative learning for ODE/PDE surrogate networks.

// `!(a > b)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod losses;
pub mod problems;
pub mod solvers;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
