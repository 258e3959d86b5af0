//! Trajectory and task data model, plus line-delimited dataset ingestion.
//!
//! A trajectory is stored as an optional initial screenshot followed by the
//! ordered action steps. Each step carries the screenshot observed *after*
//! its action executed, so step `i` (1-based) owns observation `s_i`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{group_of_length, LengthGroup};

/// Opaque reference to a screenshot. Usually a path relative to the dataset
/// file's directory; absolute paths are honoured as-is.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScreenshotRef(pub String);

impl ScreenshotRef {
    pub fn resolve(&self, base_dir: &Path) -> PathBuf {
        base_dir.join(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step {
    /// 0-based position in the parent trajectory.
    pub index: usize,
    pub action_text: String,
    /// Observation captured after the action executed.
    pub screenshot_ref: Option<ScreenshotRef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trajectory {
    pub initial_screenshot_ref: Option<ScreenshotRef>,
    steps: Vec<Step>,
}

impl Trajectory {
    /// Builds a trajectory from steps whose indices must be exactly `0..n`.
    pub fn new(
        initial_screenshot_ref: Option<ScreenshotRef>,
        steps: Vec<Step>,
    ) -> Result<Self, TrajectoryError> {
        if steps.is_empty() {
            return Err(TrajectoryError::Empty);
        }
        for (pos, step) in steps.iter().enumerate() {
            if step.index != pos {
                return Err(TrajectoryError::IndexGap {
                    expected: pos,
                    found: step.index,
                });
            }
            if step.action_text.trim().is_empty() {
                return Err(TrajectoryError::EmptyAction { index: pos });
            }
        }
        Ok(Self {
            initial_screenshot_ref,
            steps,
        })
    }

    /// Convenience constructor for text-only trajectories.
    pub fn from_actions<I, S>(actions: I) -> Result<Self, TrajectoryError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let steps = actions
            .into_iter()
            .enumerate()
            .map(|(index, a)| Step {
                index,
                action_text: a.into(),
                screenshot_ref: None,
            })
            .collect();
        Self::new(None, steps)
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    /// Always false for a constructed trajectory; present for API symmetry.
    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    /// Observation `s_i` for `i` in `0..=n`.
    pub fn observation(&self, i: usize) -> Option<&ScreenshotRef> {
        if i == 0 {
            self.initial_screenshot_ref.as_ref()
        } else {
            self.steps.get(i - 1)?.screenshot_ref.as_ref()
        }
    }

    /// Final-state observation `s_n`.
    pub fn final_observation(&self) -> Option<&ScreenshotRef> {
        self.observation(self.len())
    }

    pub fn image_availability(&self) -> ImageAvailability {
        let referenced = usize::from(self.initial_screenshot_ref.is_some())
            + self
                .steps
                .iter()
                .filter(|s| s.screenshot_ref.is_some())
                .count();
        ImageAvailability {
            frames: self.len() + 1,
            referenced,
        }
    }
}

/// How many of the `n + 1` observation slots carry a screenshot reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageAvailability {
    pub frames: usize,
    pub referenced: usize,
}

impl ImageAvailability {
    pub fn text_only(&self) -> bool {
        self.referenced == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task_id: String,
    pub instruction: String,
    pub gold_label: Option<bool>,
    pub source_tag: Option<String>,
    pub trajectory: Trajectory,
}

/// Renders the text-only view of a trajectory: one `Step i: <action>` line
/// per action, 1-based, newline separated, no trailing newline.
pub fn action_transcript(trajectory: &Trajectory) -> String {
    render_steps(trajectory.steps())
}

/// Same rendering as [`action_transcript`] for an arbitrary slice of steps;
/// numbering follows each step's global position.
pub fn render_steps(steps: &[Step]) -> String {
    let mut out = String::new();
    for (i, step) in steps.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let _ = write!(out, "Step {}: {}", step.index + 1, step.action_text);
    }
    out
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrajectoryError {
    #[error("trajectory has no steps")]
    Empty,
    #[error("step indices are not contiguous: expected {expected}, found {found}")]
    IndexGap { expected: usize, found: usize },
    #[error("step {index} has an empty action")]
    EmptyAction { index: usize },
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// Index convention observed in the input records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexConvention {
    ZeroBased,
    OneBased,
    Mixed,
    /// No records were read.
    Unknown,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub success_count: usize,
    pub failure_count: usize,
    pub unlabeled_count: usize,
    pub index_convention: IndexConvention,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub items: Vec<TaskInstance>,
    pub manifest: DatasetManifest,
    /// Directory used to resolve relative screenshot references.
    pub base_dir: PathBuf,
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn from_items(
        name: impl Into<String>,
        base_dir: impl Into<PathBuf>,
        items: Vec<TaskInstance>,
    ) -> Self {
        let manifest = DatasetManifest {
            name: name.into(),
            success_count: items.iter().filter(|t| t.gold_label == Some(true)).count(),
            failure_count: items.iter().filter(|t| t.gold_label == Some(false)).count(),
            unlabeled_count: items.iter().filter(|t| t.gold_label.is_none()).count(),
            index_convention: IndexConvention::ZeroBased,
        };
        Self {
            items,
            manifest,
            base_dir: base_dir.into(),
            warnings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, task_id: &str) -> Option<&TaskInstance> {
        self.items.iter().find(|t| t.task_id == task_id)
    }

    pub fn resolve(&self, r: &ScreenshotRef) -> PathBuf {
        r.resolve(&self.base_dir)
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    /// Check that every referenced screenshot exists on disk.
    pub verify_images: bool,
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read dataset {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate task_id {task_id:?} on lines {first_line} and {second_line}")]
    DuplicateTaskId {
        task_id: String,
        first_line: usize,
        second_line: usize,
    },
    #[error("line {line}: screenshot {path} does not exist")]
    MissingImage { line: usize, path: PathBuf },
}

/// On-disk record layout, one per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub task_id: String,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial_screenshot: Option<String>,
    pub steps: Vec<StepRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRecord {
    pub index: i64,
    pub action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub screenshot: Option<String>,
}

impl From<&TaskInstance> for TaskRecord {
    fn from(t: &TaskInstance) -> Self {
        TaskRecord {
            task_id: t.task_id.clone(),
            instruction: t.instruction.clone(),
            gold_label: t.gold_label,
            source_tag: t.source_tag.clone(),
            initial_screenshot: t.trajectory.initial_screenshot_ref.as_ref().map(|r| r.0.clone()),
            steps: t
                .trajectory
                .steps()
                .iter()
                .map(|s| StepRecord {
                    index: s.index as i64,
                    action: s.action_text.clone(),
                    screenshot: s.screenshot_ref.as_ref().map(|r| r.0.clone()),
                })
                .collect(),
        }
    }
}

fn record_to_task(
    mut rec: TaskRecord,
    line: usize,
) -> Result<(TaskInstance, IndexConvention), IngestError> {
    let malformed = |message: String| IngestError::Malformed { line, message };
    if rec.task_id.trim().is_empty() {
        return Err(malformed("task_id is empty".into()));
    }
    if rec.instruction.trim().is_empty() {
        return Err(malformed("instruction is empty".into()));
    }
    if rec.steps.is_empty() {
        return Err(malformed("steps is empty".into()));
    }
    rec.steps.sort_by_key(|s| s.index);
    let base = rec.steps[0].index;
    let convention = match base {
        0 => IndexConvention::ZeroBased,
        1 => IndexConvention::OneBased,
        other => return Err(malformed(format!("first step index is {other}, expected 0 or 1"))),
    };
    let mut steps = Vec::with_capacity(rec.steps.len());
    for (pos, s) in rec.steps.into_iter().enumerate() {
        if s.index - base != pos as i64 {
            return Err(malformed(format!(
                "step indices are not contiguous near index {}",
                s.index
            )));
        }
        if s.action.trim().is_empty() {
            return Err(malformed(format!("step {} has an empty action", s.index)));
        }
        steps.push(Step {
            index: pos,
            action_text: s.action,
            screenshot_ref: s.screenshot.map(ScreenshotRef),
        });
    }
    let trajectory = Trajectory::new(rec.initial_screenshot.map(ScreenshotRef), steps)
        .map_err(|e| malformed(e.to_string()))?;
    Ok((
        TaskInstance {
            task_id: rec.task_id,
            instruction: rec.instruction,
            gold_label: rec.gold_label,
            source_tag: rec.source_tag,
            trajectory,
        },
        convention,
    ))
}

/// Reads a line-delimited dataset. Blank lines are ignored; line numbers in
/// errors are 1-based.
pub fn load_dataset(path: &Path, options: &IngestOptions) -> Result<Dataset, IngestError> {
    let io_err = |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::open(path).map_err(io_err)?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();

    let mut items = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut convention = IndexConvention::Unknown;

    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TaskRecord = serde_json::from_str(&line).map_err(|e| IngestError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        let (task, conv) = record_to_task(rec, line_no)?;
        if let Some(&first_line) = seen.get(&task.task_id) {
            return Err(IngestError::DuplicateTaskId {
                task_id: task.task_id,
                first_line,
                second_line: line_no,
            });
        }
        if options.verify_images {
            let refs = task
                .trajectory
                .initial_screenshot_ref
                .iter()
                .chain(task.trajectory.steps().iter().filter_map(|s| s.screenshot_ref.as_ref()));
            for r in refs {
                let p = r.resolve(&base_dir);
                if !p.exists() {
                    return Err(IngestError::MissingImage {
                        line: line_no,
                        path: p,
                    });
                }
            }
        }
        convention = match (convention, conv) {
            (IndexConvention::Unknown, c) => c,
            (a, b) if a == b => a,
            _ => IndexConvention::Mixed,
        };
        seen.insert(task.task_id.clone(), line_no);
        items.push(task);
    }

    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut dataset = Dataset::from_items(name, base_dir, items);
    dataset.manifest.index_convention = convention;
    if dataset.is_empty() {
        let msg = format!("dataset {} contains no records", path.display());
        tracing::warn!("{msg}");
        dataset.warnings.push(msg);
    }
    Ok(dataset)
}

/// Writes a dataset in the same line-delimited layout `load_dataset` reads.
/// Step indices are written 0-based.
pub fn write_dataset<W: Write>(dataset: &Dataset, mut out: W) -> std::io::Result<()> {
    for item in &dataset.items {
        let line = serde_json::to_string(&TaskRecord::from(item)).map_err(std::io::Error::other)?;
        writeln!(out, "{line}")?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Stats
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsSummary {
    pub total: usize,
    pub success: usize,
    pub failure: usize,
    pub unlabeled: usize,
    /// Fractions over labeled items; both zero when nothing is labeled.
    pub success_ratio: f64,
    pub failure_ratio: f64,
    pub mean_length: f64,
    /// Item count per length group, in group order, including overflow.
    pub length_histogram: Vec<(LengthGroup, usize)>,
}

pub fn dataset_stats(dataset: &Dataset) -> StatsSummary {
    let m = &dataset.manifest;
    let labeled = m.success_count + m.failure_count;
    let (success_ratio, failure_ratio) = if labeled == 0 {
        (0.0, 0.0)
    } else {
        (
            m.success_count as f64 / labeled as f64,
            m.failure_count as f64 / labeled as f64,
        )
    };
    let mut histogram: Vec<(LengthGroup, usize)> =
        LengthGroup::ALL.iter().map(|g| (*g, 0)).collect();
    let mut total_len = 0usize;
    for item in &dataset.items {
        let n = item.trajectory.len();
        total_len += n;
        let g = group_of_length(n);
        if let Some(slot) = histogram.iter_mut().find(|(h, _)| *h == g) {
            slot.1 += 1;
        }
    }
    StatsSummary {
        total: dataset.len(),
        success: m.success_count,
        failure: m.failure_count,
        unlabeled: m.unlabeled_count,
        success_ratio,
        failure_ratio,
        mean_length: if dataset.is_empty() {
            0.0
        } else {
            total_len as f64 / dataset.len() as f64
        },
        length_histogram: histogram,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn transcript_single_step() {
        let t = Trajectory::from_actions(["tap home"]).unwrap();
        assert_eq!(action_transcript(&t), "Step 1: tap home");
    }

    #[test]
    fn transcript_is_ordered_and_deterministic() {
        let t = Trajectory::from_actions(["a", "b", "c"]).unwrap();
        let once = action_transcript(&t);
        assert_eq!(once, "Step 1: a\nStep 2: b\nStep 3: c");
        assert_eq!(once.lines().count(), 3);
        assert_eq!(once, action_transcript(&t));
    }

    #[test]
    fn loads_two_records_and_normalizes_one_based_indices() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "d.jsonl",
            concat!(
                r#"{"task_id":"a","instruction":"do a","gold_label":true,"steps":[{"index":2,"action":"second"},{"index":1,"action":"first"}]}"#,
                "\n\n",
                r#"{"task_id":"b","instruction":"do b","steps":[{"index":1,"action":"only"}]}"#,
                "\n"
            ),
        );
        let d = load_dataset(&p, &IngestOptions::default()).unwrap();
        assert_eq!(d.len(), 2);
        let a = &d.items[0].trajectory;
        assert_eq!(a.steps()[0].action_text, "first");
        assert_eq!(a.steps()[1].index, 1);
        assert_eq!(d.manifest.index_convention, IndexConvention::OneBased);
        assert_eq!(d.manifest.success_count, 1);
        assert_eq!(d.manifest.unlabeled_count, 1);
    }

    #[test]
    fn empty_file_yields_empty_dataset_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "empty.jsonl", "");
        let d = load_dataset(&p, &IngestOptions::default()).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.warnings.len(), 1);
    }

    #[test]
    fn duplicate_task_id_names_both_lines() {
        let dir = tempfile::tempdir().unwrap();
        let rec = r#"{"task_id":"dup","instruction":"x","steps":[{"index":0,"action":"a"}]}"#;
        let p = write(dir.path(), "d.jsonl", &format!("{rec}\n{rec}\n"));
        match load_dataset(&p, &IngestOptions::default()) {
            Err(IngestError::DuplicateTaskId {
                task_id,
                first_line,
                second_line,
            }) => {
                assert_eq!(task_id, "dup");
                assert_eq!((first_line, second_line), (1, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_record_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let ok = r#"{"task_id":"a","instruction":"x","steps":[{"index":0,"action":"a"}]}"#;
        let p = write(dir.path(), "d.jsonl", &format!("{ok}\n{{not json\n"));
        let err = load_dataset(&p, &IngestOptions::default()).unwrap_err();
        assert!(matches!(err, IngestError::Malformed { line: 2, .. }), "{err}");
    }

    #[test]
    fn gaps_and_empty_steps_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let gap = r#"{"task_id":"a","instruction":"x","steps":[{"index":0,"action":"a"},{"index":2,"action":"b"}]}"#;
        let p = write(dir.path(), "gap.jsonl", gap);
        assert!(load_dataset(&p, &IngestOptions::default()).is_err());
        let none = r#"{"task_id":"a","instruction":"x","steps":[]}"#;
        let p = write(dir.path(), "none.jsonl", none);
        assert!(load_dataset(&p, &IngestOptions::default()).is_err());
    }

    #[test]
    fn image_verification_is_opt_in() {
        let dir = tempfile::tempdir().unwrap();
        let rec = r#"{"task_id":"a","instruction":"x","steps":[{"index":0,"action":"a","screenshot":"shots/missing.png"}]}"#;
        let p = write(dir.path(), "d.jsonl", rec);
        assert!(load_dataset(&p, &IngestOptions::default()).is_ok());
        let err = load_dataset(&p, &IngestOptions { verify_images: true }).unwrap_err();
        assert!(matches!(err, IngestError::MissingImage { line: 1, .. }));
        fs::create_dir(dir.path().join("shots")).unwrap();
        fs::write(dir.path().join("shots/missing.png"), b"x").unwrap();
        assert!(load_dataset(&p, &IngestOptions { verify_images: true }).is_ok());
    }

    #[test]
    fn stats_ratio_and_histogram() {
        let mk = |id: usize, n: usize, label: bool| TaskInstance {
            task_id: id.to_string(),
            instruction: "x".into(),
            gold_label: Some(label),
            source_tag: None,
            trajectory: Trajectory::from_actions((0..n).map(|i| format!("a{i}"))).unwrap(),
        };
        let mut items = Vec::new();
        for i in 0..932 {
            items.push(mk(i, 5, i < 345));
        }
        let d = Dataset::from_items("x", ".", items);
        let s = dataset_stats(&d);
        assert_eq!(format!("{:.1}", s.success_ratio * 100.0), "37.0");
        assert_eq!(format!("{:.1}", s.failure_ratio * 100.0), "63.0");
        assert_eq!(s.length_histogram[0], (LengthGroup::Lt10, 932));

        let d = Dataset::from_items("y", ".", vec![mk(0, 5, true), mk(1, 15, false), mk(2, 79, true)]);
        let s = dataset_stats(&d);
        let count = |g| s.length_histogram.iter().find(|(h, _)| *h == g).unwrap().1;
        assert_eq!(count(LengthGroup::Lt10), 1);
        assert_eq!(count(LengthGroup::G10To20), 1);
        assert_eq!(count(LengthGroup::G50To80), 1);
        assert_eq!(s.length_histogram.iter().map(|(_, c)| c).sum::<usize>(), 3);
    }

    #[test]
    fn observation_indexing() {
        let steps = vec![
            Step { index: 0, action_text: "a".into(), screenshot_ref: Some(ScreenshotRef("1.png".into())) },
            Step { index: 1, action_text: "b".into(), screenshot_ref: None },
        ];
        let t = Trajectory::new(Some(ScreenshotRef("0.png".into())), steps).unwrap();
        assert_eq!(t.observation(0).unwrap().0, "0.png");
        assert_eq!(t.observation(1).unwrap().0, "1.png");
        assert!(t.final_observation().is_none());
        assert_eq!(t.image_availability(), ImageAvailability { frames: 3, referenced: 2 });
    }
}
