//! Molecular subtyping of H&E whole-slide images: tiling, Macenko stain
//! normalization, tile scoring over a subprocess protocol, threshold
//! selection, slide-level count features, a multiclass boosted-tree
//! classifier, bootstrap metrics and heatmaps.
//!
//! [`pipeline::Pipeline`] chains the stages with provenance-based caching.

pub mod csvio;
pub mod config;
pub mod error;
pub mod features;
pub mod gbdt;
pub mod heatmap;
pub mod labels;
pub mod manifest;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod rng;
pub mod scoring;
pub mod stain;
pub mod stats;
pub mod synthetic;
pub mod threshold;
pub mod tiling;
