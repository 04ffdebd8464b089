//! Geometry, the differentiable point-cloud collision value, synthetic dentitions
//! and evaluation metrics for rigid tooth arrangement.
// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod collision;
mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod synthgen;

pub use error::{Error, Result};
