// `!(x > 0.0)` is used on purpose: it rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod ensemble;
pub mod error;
pub mod layers;
pub mod training;

pub use error::{Error, Result};
