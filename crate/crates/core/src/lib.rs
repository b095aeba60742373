//! Nonnegative spatial factorization and related factor models for
//! spatially resolved count data.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases at the bottom of this file fix it to `f64`.

pub mod archive;
pub mod cluster;
pub mod error;
pub mod init;
pub mod kernels;
pub mod likelihoods;
pub mod linalg;
pub mod model;
pub mod optimizer;
pub mod params;
pub mod pipeline;
pub mod postprocess;
pub mod rng;
pub mod scalar;
pub mod simulate;
pub mod svgp;

pub use error::{NsfError, Result};
pub use scalar::Scalar;

pub type NsfModel = model::FactorModel<f64>;
pub type NsfModelF32 = model::FactorModel<f32>;
pub type SpatialComponent = svgp::SpatialComponentState<f64>;
pub type MeanFieldComponent = model::MeanFieldComponentState<f64>;
pub type Dataset = pipeline::CountDataset<f64>;
pub type Processed = postprocess::ProcessedFactorization<f64>;
