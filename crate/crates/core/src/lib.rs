// NaN-rejecting bound checks are written as `!(x <= tol)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod attention;
pub mod cli;
mod error;
pub mod kv;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
