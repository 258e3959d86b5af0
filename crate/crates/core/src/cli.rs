//! Command-line surface. Each command returns an exit code: 0 when the run
//! completed (even with per-task evaluator errors), 2 for configuration or
//! input problems, 1 for failures during the run.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::backend::{AuditSink, Backend, HttpBackend, MockBackend, MockScript, SystemClock};
use crate::metrics::{metrics_by_group, GroupTable, MetricsSummary};
use crate::pipeline::{
    evaluate_dataset, load_reports, BackendKind, ConfigError, EvaluationReport, Evaluator,
    PipelineConfig, RunError, RunOptions, Variant,
};
use crate::render::{render_agreement, render_group_table, render_metrics_table, render_precision_table, render_score_distribution};
use crate::seg_quality::{
    agreement_vs_human, load_human_labels, score_distribution, score_segmentation, Agreement,
    ScoreDistribution, SegQualityScore,
};
use crate::segmentation::{segment_trajectory, Segmentation};
use crate::trajectory::{dataset_stats, load_dataset, Dataset, IngestOptions};

#[derive(Debug, Parser)]
#[command(name = "guide", version, about = "Evaluate GUI agent trajectories with a staged model judge")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate every task of a dataset and write reports.
    Evaluate(EvaluateArgs),
    /// Score evaluator reports against gold labels.
    MetaEval(MetaEvalArgs),
    /// Score segmentation quality and optionally compare with human labels.
    SegQuality(SegQualityArgs),
    /// Print dataset statistics.
    Stats(StatsArgs),
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// TOML pipeline config; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Trajectories evaluated concurrently.
    #[arg(long)]
    pub parallelism: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use the mock backend with this script.
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
    /// Stop after this many new tasks.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub no_render: bool,
    /// Append one record per model attempt to this file.
    #[arg(long)]
    pub audit_log: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct MetaEvalArgs {
    #[arg(long)]
    pub reports: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Leave out reports flagged with evaluator errors.
    #[arg(long)]
    pub exclude_errors: bool,
    /// Add the per-length-group table.
    #[arg(long)]
    pub by_length: bool,
    /// Report precision only, for benchmarks that publish nothing else.
    #[arg(long)]
    pub precision_only: bool,
    /// Where to write metrics.json; defaults to the reports' directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SegQualityArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Reuse segmentations from an evaluation run instead of recomputing.
    #[arg(long)]
    pub reports: Option<PathBuf>,
    /// Line-delimited `{subtask_ref, usable}` records.
    #[arg(long)]
    pub human_labels: Option<PathBuf>,
    #[arg(long)]
    pub mock_script: Option<PathBuf>,
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Directory for seg_quality.jsonl and seg_quality_summary.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub dataset: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error("cannot write output: {0}")]
    Output(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Run(RunError::FingerprintMismatch { .. } | RunError::EmptyDataset) => 2,
            CliError::Run(_) | CliError::Output(_) => 1,
        }
    }
}

/// Dispatches a parsed command line, printing results to `out` and errors
/// to stderr.
pub fn run(cli: Cli, out: &mut dyn Write) -> i32 {
    let result = match cli.command {
        Command::Evaluate(a) => cmd_evaluate(&a, out),
        Command::MetaEval(a) => cmd_meta_eval(&a, out),
        Command::SegQuality(a) => cmd_seg_quality(&a, out),
        Command::Stats(a) => cmd_stats(&a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, ConfigError> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn read_dataset(path: &Path, cfg: &PipelineConfig) -> Result<Dataset, CliError> {
    let ds = load_dataset(path, &IngestOptions { verify_images: cfg.images.verify })
        .map_err(|e| CliError::Input(e.to_string()))?;
    for w in &ds.warnings {
        tracing::warn!("{w}");
    }
    Ok(ds)
}

/// Backend selected by the config, with `mock_script` forcing the mock.
pub fn build_backend(
    cfg: &PipelineConfig,
    mock_script: Option<&Path>,
) -> Result<Box<dyn Backend>, ConfigError> {
    let script_path = mock_script.map(Path::to_path_buf).or_else(|| cfg.backend.mock_script.clone());
    let kind = if mock_script.is_some() { BackendKind::Mock } else { cfg.backend.kind };
    match kind {
        BackendKind::Mock => {
            let path = script_path.ok_or(ConfigError::MissingMockScript)?;
            let script = MockScript::load(&path).map_err(|e| ConfigError::MockScript {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            Ok(Box::new(MockBackend::new(script)))
        }
        BackendKind::Http => {
            if cfg.backend.http.model.is_empty() {
                return Err(ConfigError::MissingModel);
            }
            let b = HttpBackend::new(cfg.backend.http.clone());
            if !b.has_credentials() {
                tracing::warn!(
                    "{} is not set; requests are sent without a token",
                    cfg.backend.http.auth_env
                );
            }
            Ok(Box::new(b))
        }
    }
}

pub fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(v) = a.variant {
        cfg.variant = v;
    }
    if let Some(p) = a.parallelism {
        cfg.parallelism.trajectories = p.max(1);
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let backend = build_backend(&cfg, a.mock_script.as_deref())?;
    let dataset = read_dataset(&a.dataset, &cfg)?;
    let audit = match &a.audit_log {
        Some(p) => AuditSink::append_to_file(p)?,
        None => AuditSink::Disabled,
    };
    let clock = SystemClock;
    let evaluator = Evaluator::new(cfg, backend.as_ref(), &clock, &audit, dataset.base_dir.clone())?;
    let options = RunOptions { limit: a.limit, render: !a.no_render };
    let s = evaluate_dataset(&dataset, &evaluator, &a.out, &options)?;
    writeln!(
        out,
        "evaluated {} tasks ({} already done, {} failed, {} with evaluator errors) -> {}",
        s.evaluated,
        s.skipped,
        s.failed,
        s.evaluator_errors,
        a.out.display()
    )?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct MetricsFile<'a> {
    evaluator: String,
    exclude_errors: bool,
    overall: Option<&'a MetricsSummary>,
    by_length: Option<&'a GroupTable>,
    excluded_missing_gold: usize,
    excluded_evaluator_errors: usize,
}

fn evaluator_label(reports: &[EvaluationReport]) -> String {
    let mut names: Vec<String> = reports.iter().map(|r| r.variant.to_string()).collect();
    names.sort();
    names.dedup();
    if names.is_empty() { "none".into() } else { names.join("+") }
}

pub fn cmd_meta_eval(a: &MetaEvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let reports = load_reports(&a.reports).map_err(|e| CliError::Input(e.to_string()))?;
    let dataset = load_dataset(&a.dataset, &IngestOptions::default())
        .map_err(|e| CliError::Input(e.to_string()))?;
    let table = metrics_by_group(&reports, &dataset, a.exclude_errors)
        .map_err(|e| CliError::Input(e.to_string()))?;
    let label = evaluator_label(&reports);
    match &table.overall {
        Some(m) if a.precision_only => write!(out, "{}", render_precision_table(&[(label.clone(), *m)]))?,
        Some(m) => write!(out, "{}", render_metrics_table(&[(label.clone(), *m)]))?,
        None => writeln!(out, "no scorable reports")?,
    }
    if table.excluded_missing_gold > 0 {
        writeln!(out, "{} reports excluded: no gold label", table.excluded_missing_gold)?;
    }
    if table.excluded_evaluator_errors > 0 {
        writeln!(out, "{} reports excluded: evaluator error", table.excluded_evaluator_errors)?;
    }
    if a.by_length {
        writeln!(out)?;
        write!(out, "{}", render_group_table(&table))?;
    }
    let file = MetricsFile {
        evaluator: label,
        exclude_errors: a.exclude_errors,
        overall: table.overall.as_ref(),
        by_length: a.by_length.then_some(&table),
        excluded_missing_gold: table.excluded_missing_gold,
        excluded_evaluator_errors: table.excluded_evaluator_errors,
    };
    let dest = a.out.clone().unwrap_or_else(|| {
        a.reports.parent().unwrap_or(Path::new(".")).join("metrics.json")
    });
    std::fs::write(&dest, serde_json::to_vec_pretty(&file).expect("metrics serialize"))?;
    writeln!(out, "\nwrote {}", dest.display())?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SegQualitySummary<'a> {
    distribution: &'a ScoreDistribution,
    agreement: Option<&'a Agreement>,
}

pub fn cmd_seg_quality(a: &SegQualityArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(p) = a.parallelism {
        cfg.parallelism.trajectories = p.max(1);
    }
    cfg.prompts.validate_for(&[crate::prompts::TemplateKind::SegQuality, crate::prompts::TemplateKind::Segment])
        .map_err(ConfigError::from)?;
    let backend = build_backend(&cfg, a.mock_script.as_deref())?;
    let dataset = read_dataset(&a.dataset, &cfg)?;
    let labels = match &a.human_labels {
        Some(p) => Some(load_human_labels(p).map_err(|e| CliError::Input(e.to_string()))?),
        None => None,
    };
    let from_reports: Vec<EvaluationReport> = match &a.reports {
        Some(p) => load_reports(p).map_err(|e| CliError::Input(e.to_string()))?,
        None => Vec::new(),
    };
    let audit = AuditSink::Disabled;
    let clock = SystemClock;
    let subtask_par = cfg.parallelism.subtasks;
    let trajectory_par = cfg.parallelism.trajectories;
    let max_len = cfg.max_segment_len;
    let evaluator = Evaluator::new(cfg.with_variant(Variant::Full), backend.as_ref(), &clock, &audit, dataset.base_dir.clone())?;
    let env = evaluator.env();

    let per_task: Vec<Vec<SegQualityScore>> =
        crate::diagnosis::fan_out(dataset.len(), trajectory_par, |i| {
            let task = &dataset.items[i - 1];
            let reused = from_reports
                .iter()
                .find(|r| r.task_id == task.task_id)
                .and_then(|r| r.segmentation.clone())
                .filter(|s| s.n() == task.trajectory.len());
            let seg = reused.unwrap_or_else(|| match segment_trajectory(task, &env, max_len) {
                Ok(o) => o.segmentation,
                Err((e, _)) => {
                    tracing::warn!(task = %task.task_id, "segmentation failed: {e}");
                    Segmentation::single(task.trajectory.len(), task.instruction.clone())
                }
            });
            score_segmentation(task, &seg, &env, subtask_par)
                .into_iter()
                .map(|o| o.score)
                .collect()
        });
    let scores: Vec<SegQualityScore> = per_task.into_iter().flatten().collect();
    let dist = score_distribution(&scores).map_err(|e| CliError::Input(format!("no scores: {e}")))?;
    write!(out, "{}", render_score_distribution(&dist))?;
    let agreement = match &labels {
        Some(l) => {
            let ag = agreement_vs_human(&scores, l).map_err(|e| CliError::Input(e.to_string()))?;
            writeln!(out)?;
            write!(out, "{}", render_agreement(&ag))?;
            Some(ag)
        }
        None => None,
    };
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir)?;
        let mut lines = String::new();
        for s in &scores {
            lines.push_str(&serde_json::to_string(s).expect("score serializes"));
            lines.push('\n');
        }
        std::fs::write(dir.join("seg_quality.jsonl"), lines)?;
        let summary = SegQualitySummary { distribution: &dist, agreement: agreement.as_ref() };
        std::fs::write(
            dir.join("seg_quality_summary.json"),
            serde_json::to_vec_pretty(&summary).expect("summary serializes"),
        )?;
    }
    Ok(())
}

pub fn cmd_stats(a: &StatsArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ds = load_dataset(&a.dataset, &IngestOptions::default())
        .map_err(|e| CliError::Input(e.to_string()))?;
    let s = dataset_stats(&ds);
    writeln!(out, "dataset: {}", ds.manifest.name)?;
    writeln!(out, "tasks: {} (success {}, failure {}, unlabeled {})", s.total, s.success, s.failure, s.unlabeled)?;
    writeln!(
        out,
        "labeled ratio: {:.1}% success / {:.1}% failure",
        100.0 * s.success_ratio,
        100.0 * s.failure_ratio
    )?;
    writeln!(out, "mean length: {:.1} steps", s.mean_length)?;
    for (g, c) in &s.length_histogram {
        writeln!(out, "  {:>6}: {c}", g.label())?;
    }
    Ok(())
}
