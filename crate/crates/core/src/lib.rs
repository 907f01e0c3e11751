//! Dense `N, C, H, W` tensors with tape-based reverse-mode differentiation.
//!
//! The operator set is exactly what an HRNet-style segmentation network
//! needs: convolution, half-pixel bilinear resize, batch normalisation,
//! ReLU, elementwise add, channel concatenation and per-pixel softmax
//! cross-entropy. Everything is generic over [`Scalar`] so the same code
//! runs in `f32` for training and `f64` for finite-difference checks.

mod error;
mod exec;
pub mod gradcheck;
pub mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use error::{CoreError, Result};
pub use exec::{Eager, Exec, NormMode};
pub use kernels::BatchStats;
pub use scalar::Scalar;
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;
