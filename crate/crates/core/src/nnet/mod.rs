//! Reverse-mode differentiation over dense tensors and the conditional
//! U-Net denoiser built on it.

pub mod blocks;
mod checkpoint;
mod denoiser;
mod embedding;
mod graph;
mod params;
mod tensor;

pub use checkpoint::Checkpoint;
pub use denoiser::{Denoiser, DenoiserConfig, QuantumPosition};
pub use embedding::{sinusoidal, time_embedding};
pub use graph::{CustomOp, Gradients, Graph, Var};
pub use params::{Binder, ModelParams, Param, ParamGrads, ParamKind};
pub use tensor::Tensor;
