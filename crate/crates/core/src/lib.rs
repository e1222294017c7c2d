//! Text-conditioned 3D segmentation of target volumes on synthetic CT phantoms.
//!
//! A frozen causal language model reads the clinical record through learned
//! prompts, a residual U-Net encodes the volume, and two-way attention at each
//! scale lets the text steer the decoder.

pub mod align;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod phantom;
pub mod textenc;
pub mod volnet;

pub use error::{Error, Result};

pub type Model32 = model::SegModel<f32>;
pub type Model64 = model::SegModel<f64>;
pub type Checkpoint32 = harness::Checkpoint<f32>;
pub type Checkpoint64 = harness::Checkpoint<f64>;
