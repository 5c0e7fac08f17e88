//! Variant configuration, model bundles, end-to-end runs and reporting.

pub mod bundle;
pub mod config;
pub mod cost;
pub mod report;
pub mod run;
pub mod train;

pub use bundle::{param_path, required_roles, ModelBundle};
pub use config::{PipelineConfig, TokenScoring, Variant, VariantSpec};
pub use cost::{CostCalibration, LatencyInputs, Profile, StageLatency};
pub use run::{critical_boxes, run_pipeline, Pipeline, Stage, StageMetrics};
pub use report::{bench, emit_report, BenchOptions, BenchReport, ReportFormat, ReportRow};
