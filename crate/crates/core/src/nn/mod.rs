//! Minimal dense layer library: tensors, convolution, instance
//! normalisation, resampling and first-order optimisers.

mod conv;
pub mod norm;
pub mod ops;
pub mod optim;
mod scalar;
mod tensor;

pub use conv::{Conv3d, ConvGrad};
pub use norm::NormStats;
pub use scalar::Scalar;
pub use tensor::{Shape4, Tensor};
