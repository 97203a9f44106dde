//! Experiment harness around `divdec-core`: configuration, the resumable
//! data → train → decode → evaluate pipeline, strategy sweeps, diversity
//! matching and report emission.

pub mod artifacts;
pub mod config;
pub mod pipeline;
pub mod report;
pub mod run;
pub mod sweep;

pub use config::ExperimentConfig;
pub use pipeline::{Pipeline, StageError};
