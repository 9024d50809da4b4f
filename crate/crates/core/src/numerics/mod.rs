//! Dense `f64` tensors with reverse-mode gradients.
//!
//! Layout is row-major; images and feature maps are `[H, W, C]`. Broadcasting
//! exists only where an operation names it (bias add, channel scaling,
//! spatial masks, scalar ops).

pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use graph::{avg_pool2, concat, Gradients, Graph, Var, LAYER_NORM_EPS};
pub use params::{ParamBuilder, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
