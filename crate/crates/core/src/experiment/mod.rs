//! Configuration, pipelines and metrics for the end-to-end experiments.

pub mod config;
pub mod metrics;
mod pipeline;

pub use config::ExperimentConfig;
pub use metrics::{Cell, Metrics, Provenance, Reference, Timing, METRICS_SCHEMA_VERSION};
pub use pipeline::{
    cmd_compound, cmd_offline_pipeline, cmd_online_pipeline, cmd_sweep, curve_csv, dataset_stage, denoiser_config, eval_seeds,
    evaluate, load_planner, planner_path, reference_stage, save_planner, train_planner_stage, train_value_stage, value_path,
    Artifacts, CurveRow, SweepAxis,
};
