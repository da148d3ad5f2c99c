//! Regression discontinuity analysis toolkit.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bandwidth;
pub mod cli;
pub mod continuity;
pub mod error;
pub mod locrand;
pub mod lpoly;
pub mod rdplot;
pub mod sample;
pub mod sim;
pub mod stats;
pub mod validation;

pub use error::{RdError, Result};
