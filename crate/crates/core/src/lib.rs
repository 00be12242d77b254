//! Generalizable radiance fields for animated humans: skeleton-driven
//! deformation, multi-view feature aggregation, volume rendering and
//! depth-aware appearance blending.

pub mod blend;
pub mod camera;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod features;
pub mod field;
pub mod image;
pub mod math;
pub mod metrics;
pub mod nets;
pub mod pipeline;
pub mod render;
pub mod skeleton;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
