//! Satellite-image semantic segmentation toolkit.
//!
//! The pipeline grids arbitrarily large rasters into fixed-size patches,
//! normalizes them, trains a DeepLabv3+-style network whose ASPP branches are
//! gated by tri-level attention units and whose decoder is recalibrated by a
//! squeeze-and-excitation block, and reconstructs whole-image predictions by
//! smooth tiled blending before pixel-wise metric evaluation.

pub mod config;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod nn;
pub mod plot;
pub mod preprocess;
pub mod synth;
pub mod tiling;
pub mod train;

pub use config::{Backbone, CheckpointMetric, ClassMap, ModelConfig, TrainConfig};
pub use error::{Error, Result};
pub use eval::{confusion, metrics, ConfusionMatrix, MetricsReport};
pub use model::DeepTriNet;
pub use tiling::{BlendWindow, GridSpec};
