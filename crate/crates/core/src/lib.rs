//! Semantic pseudo-labels for LiDAR sequences from rendered virtual views.
//!
//! The pipeline aligns a sequence of scans into one world-frame cloud,
//! renders intensity-greyscale views from jittered camera poses along the
//! sensor trajectory, segments each view with a pluggable 2D segmenter,
//! back-projects the per-pixel results onto the points that produced them
//! and fuses the per-point votes with an election estimator.
//!
//! Module map:
//!
//! - [`pointcloud`]: scan/sequence types, intensity normalisation, alignment
//! - [`io`]: scan, pose, label and cache file formats
//! - [`viewgen`]: virtual pose sampling and z-buffered rendering
//! - [`segmenter`]: 2D segmenter interface, oracle and file-exchange adapters
//! - [`voting`]: back-projection, vote accumulation, election
//! - [`eval`]: crop, class merging, IoU / mIoU
//! - [`synth`]: ray-cast synthetic scenes with ground truth
//! - [`pipeline`]: configuration and the staged, cached orchestrator

pub mod error;
pub mod eval;
pub mod io;
pub mod pipeline;
pub mod pointcloud;
pub mod pose;
pub mod segmenter;
pub mod synth;
pub mod viewgen;
pub mod voting;

pub use error::{Error, Result};
pub use pose::Pose;

/// Semantic class index.
pub type ClassId = u16;

/// Sentinel for "no class": unannotated ground truth or a point that received no vote.
pub const UNLABELED: ClassId = u16::MAX;
