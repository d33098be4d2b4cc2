//! Point-supervised scene parsing with cross-image distance metric learning.
//!
//! Sparse point labels train a small per-pixel network through a point-wise
//! cross-entropy loss. Embeddings of annotated pixels are additionally pulled
//! together (same class) and pushed apart (different class) across images,
//! and confident predictions near annotated points extend the label set
//! online.
//!
//! Numeric code is generic over [`Real`] (`f32` or `f64`); the aliases below
//! fix the common double-precision instantiation.

pub mod error;
pub mod evalmetrics;
pub mod extension;
pub mod griddata;
pub mod pdml;
pub mod pointloss;
pub mod scalar;
pub mod synthgen;
pub mod toynet;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;

pub type ImageGrid = griddata::ImageGrid<f64>;
pub type Dataset = griddata::Dataset<f64>;
pub type Sample = griddata::Sample<f64>;
pub type ModelParams = toynet::ModelParams<f64>;
pub type EmbeddingMap = toynet::EmbeddingMap<f64>;
pub type ScoreMap = toynet::ScoreMap<f64>;
pub type EmbeddingPoint = pdml::EmbeddingPoint<f64>;
pub type EmbeddingSet = pdml::EmbeddingSet<f64>;
pub type LossConfig = pdml::LossConfig<f64>;
pub type TrainConfig = trainer::TrainConfig<f64>;

pub type ImageGridF32 = griddata::ImageGrid<f32>;
pub type ModelParamsF32 = toynet::ModelParams<f32>;
pub type TrainConfigF32 = trainer::TrainConfig<f32>;
