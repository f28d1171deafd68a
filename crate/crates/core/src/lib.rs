//! Desk-scale 3D segmentation network with global attention and
//! two-teacher weight fusion, built on a small reverse-mode autodiff core.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` for training,
//! `f64` for gradient checks); the aliases below name the common cases.

pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape32 = tensor::Tape<f32>;
pub type Tape64 = tensor::Tape<f64>;
pub type Weights32 = nn::NamedWeights<f32>;
pub type Weights64 = nn::NamedWeights<f64>;
pub type Optim32 = fusion::OptimState<f32>;
