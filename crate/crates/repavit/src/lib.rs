//! Structural reparameterization for Vision-Transformer FFN layers with
//! channel-idle activations: models, exact train→inference weight merging,
//! parameter/MAC accounting, hand-derived gradients, and a benchmark harness.
//!
//! Everything numeric is generic over the scalar type (`f32`/`f64`) through
//! the [`Scalar`] trait; the aliases below pin the two concrete instantiations.

pub mod accounting;
pub mod bench;
pub mod error;
pub mod io;
pub mod model;
pub mod reparam;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};

pub type Mat32 = tensor::Matrix2D<f32>;
pub type Mat64 = tensor::Matrix2D<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
