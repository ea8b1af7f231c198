//! Unsupervised multi-object scene decomposition with iterative amortized
//! inference over a spatial Gaussian mixture.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the precision used for training (`f32`) and for gradient checks
//! (`f64`).

pub mod autodiff;
pub mod config;
pub mod decoder;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod scalar;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tensor64 = autodiff::Tensor<f64>;
pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type ParamStore32 = autodiff::ParamStore<f32>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
