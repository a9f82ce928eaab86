// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod encoder;
pub mod error;
pub mod eval;
pub mod objectives;
pub mod rng;
pub mod survey;
pub mod tensor;
pub mod trainer;
pub mod views;

pub use error::{Error, Result};
