//! Minimal reverse-mode autodiff over 4-D `f64` tensors.
//!
//! Tensors are `[batch, channels, height, width]` throughout. The engine is
//! deliberately small: a [`graph::Graph`] of enum ops built per step, a single
//! reverse sweep for gradients, [`params::ParameterStore`] for named weights,
//! and [`adam::Adam`] for updates. Convolutions lower to im2col plus a matrix
//! product so the hot path is one dgemm per image.

pub mod adam;
pub mod graph;
pub mod kernels;
pub mod layers;
pub mod params;

pub use adam::Adam;
pub use graph::{Graph, Gradients, Var};
pub use layers::{BatchNorm2d, Conv2d, ConvTranspose2d};
pub use params::{ParamKey, ParameterStore};

/// The one tensor type the engine operates on: `[N, C, H, W]`, f64.
pub type Tensor = ndarray::Array4<f64>;

/// Builds a `[1, 1, 1, 1]` tensor holding a scalar.
pub fn scalar(v: f64) -> Tensor {
    Tensor::from_elem((1, 1, 1, 1), v)
}
