//! Minimal tensor and reverse-mode autodiff engine used by the denoiser.

mod graph;
mod layers;
mod optim;
mod params;
mod tensor;

pub use graph::{Grads, Graph, Var};
pub use layers::{Conv, GroupNorm, Linear};
pub use optim::{AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

