//! Corner-case dataset curation and replay-based continual learning.
//!
//! The pipeline turns a raw pool of scene images into a curated corner-case
//! dataset (embedding-similarity extraction, confidence-stratified
//! partitioning, annotation-consistent augmentation) and drives an iterative
//! learning loop that replays a core dataset selected by prediction
//! consistency under perturbation.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the concrete types used by file formats and the loop.

pub mod augment;
pub mod error;
pub mod eval;
pub mod learner;
pub mod manifest;
pub mod partition;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod scoring;
pub mod synth;
pub mod uncertainty;

pub use error::{Error, ErrorKind, Result};
pub use scalar::Scalar;

/// Embedding tables as stored on disk (EMB1 carries `f32`).
pub type Embeddings = scoring::EmbeddingTable<f32>;
/// Embedding table in double precision, used by the reference loops.
pub type Embeddings64 = scoring::EmbeddingTable<f64>;
/// The toy learner used by the loop and the CLI.
pub type ToyLearner = learner::SoftmaxClassifier<f64>;
/// Single-precision toy learner.
pub type ToyLearner32 = learner::SoftmaxClassifier<f32>;
/// Feature samples in the on-disk precision.
pub type Feature = learner::FeatureSample<f64>;
