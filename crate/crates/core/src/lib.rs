//! Joint extractive question answering and discourse dependency parsing
//! over multi-party dialogue.
//!
//! The crate is layered bottom-up: [`tensor`] (dense matrices and reverse
//! mode autodiff), [`corpus`] (loading, tokenization, input assembly and a
//! synthetic generator), [`model`] (encoder and task heads),
//! [`objective`], [`decode`], [`eval`] and [`train`].
//!
//! Tensor and model code is generic over the floating-point type; the
//! aliases below fix it to `f64`, which training and checkpoints use.

pub mod corpus;
pub mod decode;
pub mod eval;
pub mod error;
pub mod model;
pub mod objective;
pub mod params;
pub mod pipeline;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph64 = tensor::Graph<f64>;
pub type Model = model::JointModel<f64>;
pub type Model32 = model::JointModel<f32>;
