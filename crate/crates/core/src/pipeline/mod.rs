//! Stage orchestration, ablation variants, and resumable dataset runs.

mod config;
mod evaluate;
mod report;
mod runner;

pub use config::{
    BackendKind, BackendSettings, ConfigError, ImageSettings, Parallelism, PipelineConfig, Variant,
};
pub use evaluate::{parse_binary_verdict, Evaluator};
pub use report::{EvaluationReport, ImageReport, Provenance, ReportSchemaError};
pub use runner::{
    evaluate_dataset, load_reports, RunError, RunManifest, RunOptions, RunSummary, TaskFailure,
    MANIFEST_FILE, RENDERED_DIR, REPORTS_FILE,
};
