//! Dataset persistence, run configuration, and the pipeline driver.

pub mod config;
pub mod formats;
pub mod pipeline;

pub use config::{DatasetBundle, PipelineConfig, RunConfig};
pub use pipeline::{
    build_training_windows, run_pipeline, simulate_to_dir, PipelineSummary, Stage,
};
