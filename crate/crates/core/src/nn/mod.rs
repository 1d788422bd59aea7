//! A small reverse-mode differentiation engine with the layer kinds the
//! segmentation models need.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod layers;
mod params;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Mode, RunningStatUpdate, Var, BN_EPS};
pub use layers::{init_parameters, Activation, Layer, LayerSpec, Network};
pub use params::{Initializer, ParamId, ParamRole, Parameter, ParameterStore};
pub use scalar::Scalar;
pub use tensor::Tensor;

/// Batch-norm running statistics keep this fraction of their old value.
pub const BN_MOMENTUM: f64 = 0.9;
