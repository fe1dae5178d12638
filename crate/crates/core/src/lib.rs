//! Stereo disparity estimation over a factor-graph probabilistic model.
//!
//! The pipeline builds a sparse disparity cost volume from zonal feature
//! matches, converts it into per-pixel prior distributions, couples pixels
//! through kernel-selected dependency factors, runs loopy belief
//! propagation to a MAP disparity map, and post-processes occlusions.
//! Middlebury-style readers, writers, and metrics round out the crate.

pub mod colormap;
pub mod cost;
pub mod error;
pub mod graph;
mod fft;
pub mod image;
pub mod io;
pub mod metrics;
pub mod neighborhood;
pub mod pipeline;
pub mod postprocess;
pub mod preprocess;
pub mod segmentation;
pub mod synth;

pub use crate::error::{Error, Result};
pub use crate::image::{DisparityMap, GrayImage, RgbRaster, INVALID_DISPARITY};
pub use crate::io::CalibInfo;
pub use crate::metrics::{MetricsReport, WeightedSummary};
pub use crate::segmentation::SegmentationMap;
