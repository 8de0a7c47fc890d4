//! Dense tensors and a linear reverse-mode tape, enough for the layers in
//! [`crate::layers`]. Convolution is a patch unfold followed by a matrix
//! product. There is no broadcasting beyond tensor-by-scalar.

pub mod gradcheck;
mod tape;
mod tensor;

use thiserror::Error;

pub use tape::{matmul_slices, output_shape, softmax_ce, Gradients, PatchGeometry, Tape, Var};
pub use tensor::{FloatWidth, Parameter, Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("domain error: {0}")]
    Domain(String),
}
