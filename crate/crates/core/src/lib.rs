//! Self-supervised part discovery from motion.
//!
//! A single-image capsule encoder predicts, for each of `K` parts, a shape
//! code, a similarity pose and a depth logit. An implicit decoder turns shape
//! codes into masks in a part-centric frame; poses map those masks into the
//! image, and a per-pixel softmax over depth-weighted masks resolves
//! occlusion. Training encodes two consecutive frames with shared weights,
//! builds a dense flow field from the per-part pose changes, and supervises
//! everything through a photometric warping loss.

pub mod ablation;
pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod eval;
pub mod flow;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod raster;
pub mod training;
pub mod viz;

pub use error::{Error, Result};
