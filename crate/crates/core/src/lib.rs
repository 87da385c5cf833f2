//! Synthetic underwater image degradation and domain-adversarial
//! encoder-decoder training.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training and
//! storage, `f64` for gradient checks and oracles); the aliases below fix the
//! scalar for the common cases.

pub mod analysis;
pub mod autodiff;
pub mod datastore;
pub mod error;
pub mod formation;
pub mod image;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod scalar;
pub mod scenes;
pub mod training;
pub mod verification;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Image32 = image::Image<f32>;
pub type Image64 = image::Image<f64>;
pub type DepthMap32 = image::DepthMap<f32>;
pub type DepthMap64 = image::DepthMap<f64>;
pub type WaterTypeSpec32 = formation::WaterTypeSpec<f32>;
pub type WaterTypeSpec64 = formation::WaterTypeSpec<f64>;
pub type SceneSample32 = formation::SceneSample<f32>;
pub type SceneSample64 = formation::SceneSample<f64>;
