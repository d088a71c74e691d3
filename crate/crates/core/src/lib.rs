//! Physical-prior segmentation refinement.
//!
//! A knowledge graph of per-category NDVI / DEM / SAR intervals ([`pckg`],
//! built by [`extract`]) drives three things: synthetic rasters for training
//! ([`synth`]), a physics-consistency term in the refiner's objective
//! ([`losses`], [`refiner`]), and interval-distance re-weighting of class
//! scores at inference ([`inference`]). [`metrics`] scores the results and
//! [`toy`] holds the small deterministic benchmark used by the ablation.

pub mod error;
pub mod extract;
pub mod grid;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod pckg;
pub mod refiner;
pub mod synth;
pub mod toy;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result, ValidationKind};
pub use grid::{FeatureMap, GridFile, LabelMask, Modality, ProbMap, Raster, RasterSet};
pub use pckg::{interval_distance, Interval, Pckg, PckgEntry};
