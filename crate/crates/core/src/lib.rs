// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod blocks;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod rf;
pub mod separation;
pub mod spectral;
pub mod tensor;

#[cfg(test)]
pub(crate) mod testutil;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
