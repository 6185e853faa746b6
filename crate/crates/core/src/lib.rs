//! Self-supervised nuclei segmentation.
//!
//! An attention network is trained through a magnification-classification
//! task on tissue tiles; its sparse attention maps are post-processed into
//! nucleus instances.

pub mod attention;
pub mod data;
pub mod error;
pub mod grid;
pub mod infer;
pub mod metrics;
pub mod nn;
pub mod plot;
pub mod pngio;
pub mod postprocess;
pub mod regularizers;
pub mod scale;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use grid::{BinaryMask, FloatMap, Grid, RgbImage};
