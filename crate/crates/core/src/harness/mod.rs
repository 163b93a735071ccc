//! Experiment plumbing: file formats, run configuration, metrics, attention
//! dumps and the ablation grid.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod features;
pub mod grid;
pub mod metrics;
