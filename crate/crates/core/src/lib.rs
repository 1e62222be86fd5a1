//! Prompt-free RGB-D video salient object detection on a small
//! reverse-mode autodiff engine.
//!
//! Everything numeric is generic over [`Scalar`]; training runs in `f32`
//! and gradient checks in `f64`. The aliases below name the two
//! instantiations.

pub mod autodiff;
pub mod clip;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod gradsuite;
pub mod losses;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod tensor;

pub use autodiff::{concat, ConvSpec, Graph, Var};
pub use clip::VideoClip;
pub use error::{Error, Result};
pub use model::{ClipOptions, ClipOutput, MemoryConfig, MemoryVariant, ModelConfig, PredictionBundle, VsodModel};
pub use params::{ParamGroup, ParamId, ParamStore, Session};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
