#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments)]

pub mod analysis;
pub mod attention;
pub mod bench;
pub mod error;
pub mod features;
pub mod fft;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod toeplitz;

pub use error::{Error, Result};
pub use tensor::Mat;
