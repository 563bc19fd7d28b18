//! Calibrated volumetric segmentation at desk scale.
//!
//! The crate trains a small 3D segmenter whose encoder stays frozen while the
//! decoder is fine-tuned under two feature-space regularizers: a Fisher
//! information penalty that discourages decoders whose loss is sharp in
//! feature space, and a confidence misalignment penalty that flags voxels
//! where the model is confident but wrong. Everything downstream of that
//! training loop lives here too: a synthetic multi-center corpus generator,
//! segmentation and calibration metrics, generalization bound calculators,
//! and a command line front end.
//!
//! All computation is `f64`, single threaded, and deterministic: two runs
//! with the same configuration produce bit-identical artifacts.

pub mod autodiff;
pub mod bounds;
pub mod config;
pub mod error;
pub mod formats;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
mod rng;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
