//! Semi-supervised vein segmentation for ultrasound-guided venipuncture.
//!
//! The crate bundles a small CPU tensor engine with reverse-mode
//! differentiation, a ResNeXt-style encoder-decoder segmentation network,
//! mean-teacher consistency training plus three semi-supervised baselines,
//! morphological mask post-processing, puncture-axis planning, and the
//! cross-validation evaluation harness. A synthetic speckle-phantom
//! generator stands in for clinical data so the whole pipeline runs at desk
//! scale.

pub mod augment;
pub mod data;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod postprocess;
pub mod trainer;
pub mod seeding;
pub mod tensor;

pub use error::{Error, Result};
