//! Tensor-level machinery: parameter storage, layers, optimizer and the
//! differentiable mel transform.

pub mod convert;
pub mod layers;
pub mod optim;
pub mod params;
pub mod spectral;

pub use convert::{array_from_tensor, scalar, tensor_from_array};
pub use layers::*;
pub use optim::{AdamW, OptimizerConfig};
pub use params::{Init, NamedTensor, ParamStore, Scope};
pub use spectral::MelTransform;
