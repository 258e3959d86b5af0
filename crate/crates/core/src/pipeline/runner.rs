use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};

use super::evaluate::Evaluator;
use super::report::EvaluationReport;
use crate::render::render_report;
use crate::trajectory::Dataset;

pub const REPORTS_FILE: &str = "reports.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RENDERED_DIR: &str = "rendered";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskFailure {
    pub task_id: String,
    pub message: String,
}

/// Run-level record. Holds nothing time-dependent, so identical runs write
/// identical manifests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_fingerprint: String,
    pub prompt_hashes: BTreeMap<String, String>,
    pub seed: u64,
    pub variant: String,
    pub backend: String,
    pub dataset: String,
    pub total_tasks: usize,
    /// Task ids with a report line, in file order.
    pub completed: Vec<String>,
    pub evaluator_errors: usize,
    pub repaired: usize,
    pub failures: Vec<TaskFailure>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunOptions {
    /// Stop after this many newly evaluated tasks.
    pub limit: Option<usize>,
    /// Write a markdown rendering per task.
    pub render: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct RunSummary {
    pub evaluated: usize,
    pub skipped: usize,
    pub failed: usize,
    pub evaluator_errors: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("the dataset is empty")]
    EmptyDataset,
    #[error("{path} belongs to a run with config {found}, not {expected}; use a fresh output directory")]
    FingerprintMismatch {
        path: String,
        expected: String,
        found: String,
    },
    #[error("cannot parse {path}: {message}")]
    Corrupt { path: String, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io { path: path.display().to_string(), source }
}

/// Valid report lines already on disk. A torn trailing line is cut off.
fn recover_reports(path: &Path) -> Result<Vec<EvaluationReport>, RunError> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).map_err(io_err(path))?;
    let mut reports = Vec::new();
    let mut good_bytes = 0u64;
    let mut torn = false;
    for line in BufReader::new(file).split(b'\n') {
        let line = line.map_err(io_err(path))?;
        match serde_json::from_slice::<EvaluationReport>(&line) {
            Ok(r) if !torn => {
                good_bytes += line.len() as u64 + 1;
                reports.push(r);
            }
            _ if line.iter().all(u8::is_ascii_whitespace) && !torn => {
                good_bytes += line.len() as u64 + 1;
            }
            _ => torn = true,
        }
    }
    if torn {
        tracing::warn!("dropping unreadable tail of {}", path.display());
        let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
        f.set_len(good_bytes).map_err(io_err(path))?;
    }
    Ok(reports)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn rendered_path(out_dir: &Path, task_id: &str) -> PathBuf {
    let safe: String = task_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    out_dir.join(RENDERED_DIR).join(format!("{safe}.md"))
}

struct Sink<'p> {
    out_dir: &'p Path,
    reports: File,
    manifest: RunManifest,
    render: bool,
}

impl Sink<'_> {
    fn save_manifest(&self) -> Result<(), RunError> {
        let body = serde_json::to_vec_pretty(&self.manifest).expect("manifest serializes");
        write_atomic(&self.out_dir.join(MANIFEST_FILE), &body)
    }

    fn accept(&mut self, outcome: Result<EvaluationReport, TaskFailure>) -> Result<(), RunError> {
        match outcome {
            Ok(report) => {
                let mut line = serde_json::to_string(&report).expect("report serializes");
                line.push('\n');
                let path = self.out_dir.join(REPORTS_FILE);
                self.reports.write_all(line.as_bytes()).map_err(io_err(&path))?;
                self.reports.flush().map_err(io_err(&path))?;
                if self.render {
                    let p = rendered_path(self.out_dir, &report.task_id);
                    fs::write(&p, render_report(&report)).map_err(io_err(&p))?;
                }
                self.manifest.evaluator_errors += usize::from(report.evaluator_error);
                self.manifest.repaired += usize::from(report.repaired);
                self.manifest.completed.push(report.task_id);
            }
            Err(f) => self.manifest.failures.push(f),
        }
        self.save_manifest()
    }
}

/// Evaluates every task not yet completed in `out_dir`, appending reports in
/// dataset order. Re-running over the same directory resumes.
pub fn evaluate_dataset(
    dataset: &Dataset,
    evaluator: &Evaluator<'_>,
    out_dir: &Path,
    options: &RunOptions,
) -> Result<RunSummary, RunError> {
    if dataset.is_empty() {
        return Err(RunError::EmptyDataset);
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    if options.render {
        let d = out_dir.join(RENDERED_DIR);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    let prov = evaluator.provenance();
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let reports_path = out_dir.join(REPORTS_FILE);

    let previous: Option<RunManifest> = if manifest_path.exists() {
        let body = fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
        Some(serde_json::from_slice(&body).map_err(|e| RunError::Corrupt {
            path: manifest_path.display().to_string(),
            message: e.to_string(),
        })?)
    } else {
        None
    };
    if let Some(m) = &previous {
        if m.config_fingerprint != prov.config_fingerprint {
            return Err(RunError::FingerprintMismatch {
                path: manifest_path.display().to_string(),
                expected: prov.config_fingerprint.clone(),
                found: m.config_fingerprint.clone(),
            });
        }
    }
    let existing = recover_reports(&reports_path)?;
    if let Some(r) = existing.iter().find(|r| r.provenance.config_fingerprint != prov.config_fingerprint) {
        return Err(RunError::FingerprintMismatch {
            path: reports_path.display().to_string(),
            expected: prov.config_fingerprint.clone(),
            found: r.provenance.config_fingerprint.clone(),
        });
    }

    // Rebuild run state from the report file, which is the source of truth.
    let mut manifest = RunManifest {
        config_fingerprint: prov.config_fingerprint.clone(),
        prompt_hashes: prov.prompt_hashes.clone(),
        seed: prov.seed,
        variant: evaluator.config().variant.to_string(),
        backend: prov.backend.clone(),
        dataset: dataset.manifest.name.clone(),
        total_tasks: dataset.len(),
        completed: Vec::new(),
        evaluator_errors: 0,
        repaired: 0,
        failures: Vec::new(),
    };
    let mut done = BTreeSet::new();
    for r in &existing {
        if done.insert(r.task_id.clone()) {
            manifest.completed.push(r.task_id.clone());
            manifest.evaluator_errors += usize::from(r.evaluator_error);
            manifest.repaired += usize::from(r.repaired);
        }
    }

    let pending: Vec<usize> = (0..dataset.len())
        .filter(|&i| !done.contains(&dataset.items[i].task_id))
        .take(options.limit.unwrap_or(usize::MAX))
        .collect();
    let skipped = dataset.len() - dataset.items.iter().filter(|t| !done.contains(&t.task_id)).count();

    let reports = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&reports_path)
        .map_err(io_err(&reports_path))?;
    let mut sink = Sink { out_dir, reports, manifest, render: options.render };
    sink.save_manifest()?;

    let workers = evaluator.config().parallelism.trajectories.clamp(1, pending.len().max(1));
    let next = AtomicUsize::new(0);
    let (tx, rx) = mpsc::channel::<(usize, Result<EvaluationReport, TaskFailure>)>();
    let mut summary = RunSummary { skipped, ..RunSummary::default() };

    let result = std::thread::scope(|s| -> Result<(), RunError> {
        for _ in 0..workers {
            let tx = tx.clone();
            let next = &next;
            let pending = &pending;
            s.spawn(move || loop {
                let slot = next.fetch_add(1, Ordering::Relaxed);
                let Some(&idx) = pending.get(slot) else { break };
                let task = &dataset.items[idx];
                let outcome = panic::catch_unwind(AssertUnwindSafe(|| evaluator.evaluate(task)))
                    .map_err(|p| panic_message(p.as_ref()))
                    .and_then(|r| r.validate().map(|_| r).map_err(|e| e.to_string()))
                    .map_err(|message| TaskFailure { task_id: task.task_id.clone(), message });
                if tx.send((slot, outcome)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        // Reorder buffer: emit strictly in pending order.
        let mut buffer = BTreeMap::new();
        let mut emit = 0usize;
        for (slot, outcome) in rx {
            buffer.insert(slot, outcome);
            while let Some(outcome) = buffer.remove(&emit) {
                match &outcome {
                    Ok(r) => {
                        summary.evaluated += 1;
                        summary.evaluator_errors += usize::from(r.evaluator_error);
                    }
                    Err(f) => {
                        tracing::error!(task = %f.task_id, "task failed: {}", f.message);
                        summary.failed += 1;
                    }
                }
                sink.accept(outcome)?;
                emit += 1;
            }
        }
        Ok(())
    });
    result?;
    Ok(summary)
}

fn panic_message(p: &(dyn std::any::Any + Send)) -> String {
    let msg = p
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| p.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into());
    format!("evaluation panicked: {msg}")
}

/// Reads a report file written by [`evaluate_dataset`].
pub fn load_reports(path: &Path) -> Result<Vec<EvaluationReport>, RunError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let r = serde_json::from_str(&line).map_err(|e| RunError::Corrupt {
            path: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?;
        out.push(r);
    }
    Ok(out)
}
