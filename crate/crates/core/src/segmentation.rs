//! Trajectory segmentation: partitions the action steps into contiguous,
//! described subtasks from text alone.
//!
//! A segmentation is a boundary list `0 = b0 < b1 < ... < bk = n`; subtask
//! `i` covers the 1-based steps `b(i-1)+1 ..= b(i)`.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::backend::{ChatRequest, Part, RetriesExhausted, Stage};
use crate::prompts::TemplateKind;
use crate::stage::{as_int, get_trimmed, StageEnv, StageStats};
use crate::trajectory::{action_transcript, TaskInstance};

pub const DEFAULT_MAX_SEGMENT_LEN: usize = 30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskSpec {
    /// 1-based.
    pub index: usize,
    pub description: String,
    /// Inclusive, 1-based action step range.
    pub start_step: usize,
    pub end_step: usize,
    pub repaired: bool,
}

impl SubtaskSpec {
    pub fn len(&self) -> usize {
        self.end_step + 1 - self.start_step
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn span_label(&self) -> String {
        if self.start_step == self.end_step {
            format!("step {}", self.start_step)
        } else {
            format!("steps {}-{}", self.start_step, self.end_step)
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SegmentationError {
    #[error("boundaries must start at 0, end at {n} and strictly increase: {boundaries:?}")]
    InvalidBoundaries { boundaries: Vec<usize>, n: usize },
    #[error("{descriptions} descriptions for {segments} segments")]
    DescriptionCount { descriptions: usize, segments: usize },
    #[error("subtask {0} has an empty description")]
    EmptyDescription(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SegmentationRepr", into = "SegmentationRepr")]
pub struct Segmentation {
    boundaries: Vec<usize>,
    subtasks: Vec<SubtaskSpec>,
    repair_notes: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct SegmentationRepr {
    boundaries: Vec<usize>,
    subtasks: Vec<SubtaskSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    repair_notes: Vec<String>,
}

impl TryFrom<SegmentationRepr> for Segmentation {
    type Error = SegmentationError;

    fn try_from(r: SegmentationRepr) -> Result<Self, Self::Error> {
        let n = r.boundaries.last().copied().unwrap_or(0);
        let descriptions = r.subtasks.iter().map(|s| s.description.clone()).collect();
        let repaired: Vec<bool> = r.subtasks.iter().map(|s| s.repaired).collect();
        let mut seg = Segmentation::from_boundaries(r.boundaries, n, descriptions)?;
        for (s, flag) in seg.subtasks.iter_mut().zip(repaired) {
            s.repaired = flag;
        }
        seg.repair_notes = r.repair_notes;
        Ok(seg)
    }
}

impl From<Segmentation> for SegmentationRepr {
    fn from(s: Segmentation) -> Self {
        SegmentationRepr {
            boundaries: s.boundaries,
            subtasks: s.subtasks,
            repair_notes: s.repair_notes,
        }
    }
}

impl Segmentation {
    /// Validated constructor. `descriptions` must have one entry per segment.
    pub fn from_boundaries(
        boundaries: Vec<usize>,
        n: usize,
        descriptions: Vec<String>,
    ) -> Result<Self, SegmentationError> {
        let valid = boundaries.len() >= 2
            && boundaries[0] == 0
            && *boundaries.last().unwrap() == n
            && boundaries.windows(2).all(|w| w[0] < w[1]);
        if !valid {
            return Err(SegmentationError::InvalidBoundaries { boundaries, n });
        }
        let k = boundaries.len() - 1;
        if descriptions.len() != k {
            return Err(SegmentationError::DescriptionCount {
                descriptions: descriptions.len(),
                segments: k,
            });
        }
        let subtasks = descriptions
            .into_iter()
            .enumerate()
            .map(|(i, description)| {
                if description.trim().is_empty() {
                    return Err(SegmentationError::EmptyDescription(i + 1));
                }
                Ok(SubtaskSpec {
                    index: i + 1,
                    description,
                    start_step: boundaries[i] + 1,
                    end_step: boundaries[i + 1],
                    repaired: false,
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            boundaries,
            subtasks,
            repair_notes: Vec::new(),
        })
    }

    /// One segment spanning the whole trajectory.
    pub fn single(n: usize, description: impl Into<String>) -> Self {
        Self::from_boundaries(vec![0, n], n, vec![description.into()])
            .expect("n >= 1 and a non-empty description")
    }

    pub fn boundaries(&self) -> &[usize] {
        &self.boundaries
    }

    pub fn subtasks(&self) -> &[SubtaskSpec] {
        &self.subtasks
    }

    /// Subtask by 1-based index.
    pub fn subtask(&self, i: usize) -> Option<&SubtaskSpec> {
        i.checked_sub(1).and_then(|j| self.subtasks.get(j))
    }

    pub fn k(&self) -> usize {
        self.subtasks.len()
    }

    pub fn n(&self) -> usize {
        *self.boundaries.last().unwrap()
    }

    pub fn repaired(&self) -> bool {
        self.subtasks.iter().any(|s| s.repaired)
    }

    pub fn repair_notes(&self) -> &[String] {
        &self.repair_notes
    }

    pub fn max_segment_len(&self) -> usize {
        self.boundaries.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }

    fn mark_repaired(&mut self, note: String) {
        for s in &mut self.subtasks {
            s.repaired = true;
        }
        self.repair_notes.push(note);
    }
}

fn placeholder_description(start: usize, end: usize) -> String {
    format!("Unnamed subtask (steps {start}\u{2013}{end})")
}

/// Turns an arbitrary boundary proposal into a valid partition of `n` steps.
///
/// Values are sorted, de-duplicated and dropped when outside `0..=n`; `0`
/// and `n` are always included. Descriptions are truncated or padded to the
/// segment count. An empty proposal, or `[0, n]` without descriptions,
/// becomes the single segment described by `fallback_description`. The
/// result's subtasks are flagged `repaired` whenever any of these rules
/// changed the input.
pub fn normalize_boundaries(
    raw: &[i64],
    n: usize,
    raw_descriptions: &[String],
    fallback_description: &str,
) -> Segmentation {
    let n = n.max(1);
    let mut notes = Vec::new();

    let mut values: Vec<usize> = Vec::with_capacity(raw.len() + 2);
    let mut dropped = 0;
    for &b in raw {
        if (0..=n as i64).contains(&b) {
            values.push(b as usize);
        } else {
            dropped += 1;
        }
    }
    if dropped > 0 {
        notes.push(format!("dropped {dropped} out-of-range boundaries"));
    }
    if !values.windows(2).all(|w| w[0] <= w[1]) {
        notes.push("sorted boundaries".to_owned());
    }
    values.sort_unstable();
    let before = values.len();
    values.dedup();
    if values.len() != before {
        notes.push("removed duplicate boundaries".to_owned());
    }
    if values.first() != Some(&0) {
        values.insert(0, 0);
        if !raw.is_empty() {
            notes.push("inserted boundary 0".to_owned());
        }
    }
    if values.last() != Some(&n) {
        values.push(n);
        if !raw.is_empty() {
            notes.push(format!("inserted final boundary {n}"));
        }
    }

    let usable: Vec<String> = raw_descriptions
        .iter()
        .map(|d| d.trim().to_owned())
        .collect();
    let degenerate = raw.is_empty() || (values.len() == 2 && usable.iter().all(String::is_empty));
    if degenerate {
        let mut seg = Segmentation::single(n, fallback_description);
        seg.mark_repaired("no usable boundary proposal; using one segment".to_owned());
        return seg;
    }

    let k = values.len() - 1;
    if usable.len() != k {
        notes.push(format!(
            "{} descriptions for {k} segments",
            usable.len()
        ));
    }
    let descriptions: Vec<String> = (0..k)
        .map(|i| match usable.get(i) {
            Some(d) if !d.is_empty() => d.clone(),
            Some(_) => {
                notes.push(format!("subtask {} had an empty description", i + 1));
                placeholder_description(values[i] + 1, values[i + 1])
            }
            None => placeholder_description(values[i] + 1, values[i + 1]),
        })
        .collect();

    let mut seg = Segmentation::from_boundaries(values, n, descriptions)
        .expect("normalized boundaries form a valid partition");
    if !notes.is_empty() {
        let note = notes.join("; ");
        seg.mark_repaired(note);
    }
    seg
}

/// Splits every segment longer than `max_len` into `ceil(len / max_len)`
/// near-equal pieces (earlier pieces take the remainder). Pieces are
/// described as `"<description> (part j)"`.
pub fn enforce_max_segment(seg: &Segmentation, max_len: usize) -> Segmentation {
    let max_len = max_len.max(1);
    if seg.max_segment_len() <= max_len {
        return seg.clone();
    }
    let mut boundaries = vec![0];
    let mut descriptions = Vec::new();
    let mut split_flags = Vec::new();
    let mut notes = seg.repair_notes.clone();
    for (w, spec) in seg.boundaries.windows(2).zip(&seg.subtasks) {
        let (start, end) = (w[0], w[1]);
        let len = end - start;
        if len <= max_len {
            boundaries.push(end);
            descriptions.push(spec.description.clone());
            split_flags.push(spec.repaired);
            continue;
        }
        let pieces = len.div_ceil(max_len);
        let (base, extra) = (len / pieces, len % pieces);
        let mut at = start;
        for j in 0..pieces {
            at += base + usize::from(j < extra);
            boundaries.push(at);
            descriptions.push(format!("{} (part {})", spec.description, j + 1));
            split_flags.push(true);
        }
        notes.push(format!(
            "split subtask {} ({len} steps) into {pieces} parts of at most {max_len}",
            spec.index
        ));
    }
    let mut out = Segmentation::from_boundaries(boundaries, seg.n(), descriptions)
        .expect("splitting preserves the partition");
    for (s, flag) in out.subtasks.iter_mut().zip(split_flags) {
        s.repaired = flag;
    }
    out.repair_notes = notes;
    out
}

/// Model proposal after schema parsing, before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentProposal {
    pub end_steps: Vec<i64>,
    pub descriptions: Vec<String>,
    /// Entries that were dropped or whose start disagreed with the
    /// preceding end.
    pub irregular: bool,
}

/// Reads `{subtasks: [{description, start_step, end_step}]}` (or a bare
/// array of such entries). Only a missing subtask list is a schema error;
/// malformed entries are dropped and later repaired.
pub fn parse_segment_proposal(v: &Value, n: usize) -> Result<SegmentProposal, String> {
    let entries = match v {
        Value::Array(a) => a,
        Value::Object(_) => v
            .get("subtasks")
            .and_then(Value::as_array)
            .ok_or_else(|| "missing \"subtasks\" array".to_owned())?,
        _ => return Err("expected a record".to_owned()),
    };
    let mut irregular = false;
    let mut pairs: Vec<(i64, Option<i64>, String)> = Vec::new();
    for e in entries {
        let end = e.get("end_step").and_then(as_int);
        let start = e.get("start_step").and_then(as_int);
        let Some(mut end) = end else {
            irregular = true;
            continue;
        };
        if end > n as i64 {
            end = n as i64;
            irregular = true;
        }
        if end < 1 {
            irregular = true;
            continue;
        }
        pairs.push((end, start, get_trimmed(e, "description")));
    }
    if !pairs.windows(2).all(|w| w[0].0 <= w[1].0) {
        irregular = true;
        pairs.sort_by_key(|p| p.0);
    }
    let mut end_steps = Vec::new();
    let mut descriptions = Vec::new();
    let mut prev_end = 0i64;
    for (end, start, desc) in pairs {
        if end_steps.last() == Some(&end) {
            irregular = true;
            continue;
        }
        if start.is_some_and(|s| s != prev_end + 1) {
            irregular = true;
        }
        prev_end = end;
        end_steps.push(end);
        descriptions.push(desc);
    }
    Ok(SegmentProposal {
        end_steps,
        descriptions,
        irregular,
    })
}

/// Segmentation of a proposal: boundaries are `0` followed by the end steps.
pub fn segmentation_from_proposal(
    p: &SegmentProposal,
    n: usize,
    fallback_description: &str,
) -> Segmentation {
    let raw: Vec<i64> = if p.end_steps.is_empty() {
        Vec::new()
    } else {
        std::iter::once(0).chain(p.end_steps.iter().copied()).collect()
    };
    let mut seg = normalize_boundaries(&raw, n, &p.descriptions, fallback_description);
    if p.irregular && !seg.repaired() {
        seg.mark_repaired("irregular subtask ranges in model output".to_owned());
    }
    seg
}

pub fn build_segment_request(task: &TaskInstance, env: &StageEnv<'_>) -> ChatRequest {
    let transcript = action_transcript(&task.trajectory);
    let (system, user) = env
        .prompts
        .render(
            TemplateKind::Segment,
            &[
                ("task_instruction", task.instruction.as_str()),
                ("action_transcript", transcript.as_str()),
            ],
        )
        .expect("prompt set validated at configuration time");
    env.finish(
        ChatRequest::new(Stage::Segment, system, vec![Part::Text(user)])
            .expect("one text part and no images"),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationOutcome {
    pub segmentation: Segmentation,
    pub stats: StageStats,
}

/// Runs the segmentation call and returns a valid partition, split so no
/// segment exceeds `max_segment_len`.
pub fn segment_trajectory(
    task: &TaskInstance,
    env: &StageEnv<'_>,
    max_segment_len: usize,
) -> Result<SegmentationOutcome, (RetriesExhausted, StageStats)> {
    let n = task.trajectory.len();
    let req = build_segment_request(task, env);
    let done = env
        .call_json(&req, |v| parse_segment_proposal(v, n))
        .map_err(|e| {
            let stats = StageStats::from_exhausted(&e);
            (e, stats)
        })?;
    let seg = segmentation_from_proposal(&done.value, n, &task.instruction);
    Ok(SegmentationOutcome {
        segmentation: enforce_max_segment(&seg, max_segment_len),
        stats: StageStats::from_completed(&done),
    })
}
