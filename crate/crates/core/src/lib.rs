//! Relative-depth estimation toolkit for surgical-style scenes.
//!
//! * [`depthdata`]: image/depth containers, dataset I/O and synthetic scenes
//! * [`metrics`]: median scaling, Abs. Rel. and δ accuracy
//! * [`model`]: a small patch-transformer encoder with a dense depth decoder
//! * [`train`]: L1 fine-tuning with AdamW, feature alignment, gradient checks
//! * [`semisup`]: teacher pseudo-labels and perturbed student training

pub mod depthdata;
mod fsutil;
pub mod metrics;
pub mod model;
mod resample;
pub mod semisup;
pub mod train;

pub use fsutil::write_atomic;
