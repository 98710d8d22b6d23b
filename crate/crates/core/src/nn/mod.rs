//! Minimal reverse-mode autodiff on dense f32 tensors.

mod attention;
mod conv;
mod gemm;
mod graph;
pub mod ops;
mod params;
mod tensor;

pub use attention::attention;
pub use conv::{conv3d, resize_axis, resize_trilinear, ConvGeom};
pub use graph::{backward, Gradients, Var};
pub use params::{AdamConfig, AdamW, Bound, Init, ParamId, ParamStore};
pub use tensor::Tensor;
