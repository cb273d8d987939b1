#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod bench;
pub mod em;
pub mod error;
pub mod filter;
pub mod kernels;
pub mod model;
pub mod simulate;
pub mod smoother;

pub use error::{Error, Result};
