// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod benchmark;
pub mod bessel;
pub mod error;
pub mod estimator;
pub mod field;
pub mod grounding;
pub mod parser;
pub mod polar;
pub mod scene;
pub mod session;

pub use error::{Error, Result};
