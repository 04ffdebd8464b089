//! Command-line front end: dataset generation, contact attachment, training,
//! evaluation and the collision-weight and arch-width sweeps.
// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attach;
pub mod commands;
pub mod config;
mod error;
pub mod plot;

pub use error::{CliError, Result};
