//! Multi-scene absolute camera pose regression with transformers.
//!
//! A self-contained engine: dense-tensor reverse-mode autodiff, the dual
//! encoder/decoder transformer architecture over convolutional activation
//! maps, scene classification with learnt scene queries, the
//! learnable-weighted pose loss, quaternion pose metrics, dataset handling
//! with a deterministic synthetic generator, and an Adam training loop with
//! checkpointing.

pub mod config;
pub mod data;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod nn;
pub mod pose;
pub mod rng;
pub mod tensor;
pub mod train;

pub use rng::RngState;
pub use tensor::{backward, concat, Element, Init, ParamSet, Parameter, Tensor, TensorError};
