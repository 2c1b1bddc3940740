//! Reverse-mode automatic differentiation over small dense tensors.
//!
//! The engine supports exactly the operations a compact U-Net needs:
//! same-padded convolutions, per-channel bias, rectifiers, 2× max pooling,
//! 2× bilinear upsampling, channel concatenation and a channel-wise
//! log-softmax. Each backward rule is written in terms of these operations
//! (convolution, its input adjoint and its weight adjoint form a closed
//! triangle, pooling pairs a gather with a scatter, upsampling pairs with its
//! adjoint), so gradients can be differentiated again. That is what
//! second-order meta-learning requires.

pub mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Graph, Var};
pub use kernels::ConvGeometry;
pub use tensor::Tensor;
