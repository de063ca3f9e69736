//! Classifiers for small-sample, high-dimensional tabular data whose
//! first-layer weights are generated from unsupervised feature embeddings.
//!
//! A weight predictor network maps each feature's embedding to its column
//! of first-layer weights, and a sparsity network maps the same embedding
//! to an importance score in (0, 1) that scales that column. Training
//! minimises class-weighted cross-entropy plus `λ · Σ scores`.
//!
//! Modules, bottom-up:
//! - [`numerics`]: matrices, reverse-mode tape, gradient checking, RNG
//! - [`embeddings`]: per-feature embeddings (NMF, SVD, histograms, raw values)
//! - [`network`]: MLP layers, weighted loss, AdamW, schedule
//! - [`wpfs`]: the model, importance scores, parameter accounting, persistence
//! - [`harness`]: datasets, cross-validation, training loop, metrics

pub mod embeddings;
pub mod error;
pub mod harness;
pub mod network;
pub mod numerics;
pub mod wpfs;

pub use error::{Error, Result};
pub use numerics::{Matrix, ParameterStore, Rng};
