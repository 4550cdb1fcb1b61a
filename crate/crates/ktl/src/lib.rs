//! Unsupervised landmark discovery from generic keypoints via self-training
//! correspondence.
//!
//! The pipeline runs in two stages. Stage 1 alternates between clustering
//! keypoint descriptors into pseudo-labels and training a shared-backbone
//! detector/descriptor network on those labels. Stage 2 trains a K-channel
//! heatmap detector supervised by the recovered correspondences. Everything
//! runs on a synthetic deformable-object corpus with hidden ground truth, so
//! each claim is checkable end to end.

pub mod correspondence;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod keypoints;
pub mod model;
pub mod raster;
pub mod rng;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
