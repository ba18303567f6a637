//! Differentiable operations. Each op computes its output eagerly and, when
//! an input is tracked, registers its backward rule on the shared tape.

pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod norm;
pub mod reduce;
pub mod resample;
pub mod shape;

pub use conv::conv_out_extent;
