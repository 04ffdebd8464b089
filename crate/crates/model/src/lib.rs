//! Point-cloud tooth arrangement network with a hand-written reverse-mode tape.
// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
mod error;
pub mod layers;
pub mod losses;
pub mod network;
pub mod params;
pub mod train;

pub use error::{ModelError, Result};
