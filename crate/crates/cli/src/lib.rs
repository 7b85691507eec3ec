//! Experiment runner for the anomaly-aware segmentation pipeline: config
//! parsing, run directories, stage commands, manifests, and heatmap export.

pub mod config;
pub mod gradcheck;
pub mod manifest;
pub mod pgm;
pub mod stages;

pub use config::RunConfig;
pub use stages::{execute, CliError, Stage};
