#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bfm;
pub mod checks;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod params;
pub mod scalar;
pub mod ssm;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::Tape;
pub use tensor::Tensor;
