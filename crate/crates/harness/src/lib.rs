//! Experiment orchestration: configuration, staged pipeline, artifacts and
//! report files.

pub mod artifacts;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod reference;
pub mod report;

pub use config::{DataSource, ExperimentConfig};
pub use error::{HarnessError, Result};
pub use pipeline::{load_datasets, run_pipeline, Pipeline, PipelineOutcome, Stage};
pub use report::{ReportBundle, ReportSummary, SweepRecord};
