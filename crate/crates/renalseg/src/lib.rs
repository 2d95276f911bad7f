//! Experiment orchestration: phantom generation, the five segmentation
//! strategies, cross-validated training and evaluation, and reports.

pub mod config;
pub mod data;
pub mod error;
pub mod pipeline;
pub mod report;

pub use config::{ExperimentConfig, Strategy};
pub use error::{PipelineError, Result};
pub use pipeline::{run_experiment, run_strategy, RunOutput};
pub use report::{compare_strategies, Comparison, Report, RunManifest};

pub const TOOL_VERSION: &str = concat!("renalseg ", env!("CARGO_PKG_VERSION"));
