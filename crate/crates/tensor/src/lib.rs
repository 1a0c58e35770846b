//! Minimal dense tensors with reverse-mode automatic differentiation.
//!
//! Values are `f64` in row-major order. A [`Graph`] records each forward op
//! as an append-only node; [`Graph::backward`] sweeps the nodes once in
//! reverse and accumulates gradients on leaf and parameter nodes. The op set
//! covers exactly what the multi-task UNet variants need: standard and
//! depthwise convolution, 2x pooling and upsampling, channel concat, dense
//! layers, global average pooling, the usual activations, dropout, and the
//! elementwise arithmetic used by the losses.

pub mod checkpoint;
mod error;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{log_sigmoid, sigmoid, Graph, LayerKind, Var};
pub use params::{ParamId, ParamSet};
pub use tensor::Tensor;
