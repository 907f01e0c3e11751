//! Tape-free forward and backward kernels.
//!
//! Every differentiable operator is a pair of pure functions here. The
//! [`Tape`](crate::Tape) records which ones ran; eager inference calls the
//! forward halves directly.

mod conv;
mod loss;
mod norm;
mod pointwise;
mod resize;

pub use conv::{conv2d, conv2d_backward, ConvGeometry};
pub use loss::{softmax_cross_entropy_backward, softmax_cross_entropy_mean, CrossEntropySaved};
pub use norm::{batch_norm_backward, batch_norm_eval, batch_norm_train, BatchStats, NormSaved};
pub use pointwise::{add, concat_channels, mul, relu, relu_backward, same_shape, split_channels};
pub use resize::{bilinear_resize, bilinear_resize_backward};
