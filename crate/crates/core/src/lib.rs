//! Point-cloud feature learning with intra-region structure learning (ISL)
//! and inter-region relation learning (IRL).
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`]: dense 64-bit arrays, a recording tape with reverse-mode
//!   gradients, the parameter store and its binary container.
//! * [`geometry`]: distances, k-NN graphs, farthest point sampling and
//!   inverse-distance interpolation weights.
//! * [`isl`]: neighbor-based, self-based and gated fusion of point features.
//! * [`irl`]: score-driven region partition, representative sampling,
//!   per-slot attention across regions and interpolation back to all points.
//!   Partition and sampling strategies live in name-keyed registries.
//! * [`models`]: network assemblies for classification, keypoint saliency and
//!   part segmentation.
//! * [`trainkit`]: synthetic shapes, augmentation, losses, optimizers,
//!   schedules, metrics and the training loop.

pub mod error;
pub mod geometry;
pub mod gradsuite;
pub mod irl;
pub mod isl;
pub mod models;
pub mod registry;
pub mod tensor;
pub mod trainkit;

pub use error::{Error, Result};
