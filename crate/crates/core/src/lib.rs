//! Balanced per-environment mini-batch sampling for out-of-distribution
//! generalization on multi-label grayscale image tasks.
//!
//! The library covers the full pipeline: multi-environment dataset handling
//! (`data`), stochastic affine augmentation (`augment`), the two batch
//! construction strategies under comparison (`sampler`), a small trainable
//! classifier with masked weighted BCE and Adam/amsgrad (`nn`), rank-based
//! ROC-AUC reporting (`metrics`), and the leave-a-dataset-out experiment
//! harness (`experiment`).

pub mod augment;
pub mod data;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod sampler;
