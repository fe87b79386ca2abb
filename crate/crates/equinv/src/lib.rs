//! Training and evaluation of image feature extractors with joint
//! equivariance and invariance objectives over a quantized transformation
//! space, plus multi-generation self-distillation and few-shot evaluation.

pub mod arena;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fewshot;
pub mod layers;
pub mod losses;
pub mod membank;
pub mod model;
pub mod pca;
pub mod rng;
pub mod scalar;
pub mod trainer;
pub mod transforms;

pub use error::{Error, Result};
pub use scalar::Real;
