// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fsutil;
pub mod tensor;
pub mod unet;
pub mod data;
pub mod eval;
pub mod training;
pub mod interpret;
pub mod cli;

pub use error::{Error, Result};
pub use tensor::{Graph, RngStream, Scalar, Tensor, Var};
pub use unet::{build, count_parameters, Head, ModelParams, Provenance, UNetConfig};
