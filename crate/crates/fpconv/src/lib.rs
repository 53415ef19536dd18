//! FPConv: a surface-style point convolution that flattens local 3D
//! neighborhoods onto a 2D grid through a learned, normalized projection
//! weight matrix, plus the geometry, network blocks, synthetic data, and
//! training pipeline around it.

pub mod blocks;
pub mod data;
pub mod error;
pub mod flatten;
pub mod geometry;
pub mod network;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{no_grad, Scalar, Tensor};
