//! Deep metric learning for re-identification: a three-branch
//! convolutional extractor over body-part patches, a learned Mahalanobis
//! metric factorized as M = WWᵀ with an orthogonality constraint, sample
//! mining for training pairs, and a single-shot CMC evaluation harness.
//!
//! The numeric core is generic over the scalar type via [`scalar::Scalar`]
//! (f32 or f64); pipeline-level code runs on the [`Real`] alias.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod extractor;
pub mod graph;
pub mod linalg;
pub mod metric;
pub mod mining;
pub mod model;
pub mod scalar;
pub mod tensor;
pub mod train;

/// Scalar type used by the training and evaluation pipeline.
pub type Real = f64;
/// Single-precision alternative for size/speed experiments.
pub type Real32 = f32;

pub use error::{Error, Result};
pub use eval::{cmc, rank1, CmcCurve, EvalSplit};
pub use metric::{FeatureVector, MetricLayer};
pub use model::Model;
pub use tensor::Tensor;
