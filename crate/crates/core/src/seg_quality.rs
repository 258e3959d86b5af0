//! Independent scoring of segmentation quality on a 1 to 5 rubric, plus the
//! distribution and human-agreement tooling around it.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::backend::{ChatRequest, Part, Stage};
use crate::diagnosis::{fan_out, push_segment_images, ImageTally};
use crate::metrics::{cohen_kappa_detail, KappaDetail, MetaEvalError};
use crate::prompts::TemplateKind;
use crate::segmentation::Segmentation;
use crate::stage::{as_int, get_trimmed, StageEnv, StageStats};
use crate::trajectory::{render_steps, TaskInstance};

pub const USABLE_THRESHOLD: u8 = 4;

/// `task_id` plus 1-based subtask index. Serialized as `"task_id#i"`; the
/// record form `{task_id, subtask}` is accepted on input.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubtaskRef {
    pub task_id: String,
    pub subtask: usize,
}

impl SubtaskRef {
    pub fn new(task_id: impl Into<String>, subtask: usize) -> Self {
        Self { task_id: task_id.into(), subtask }
    }
}

impl fmt::Display for SubtaskRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.task_id, self.subtask)
    }
}

impl std::str::FromStr for SubtaskRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (task, idx) = s
            .rsplit_once('#')
            .ok_or_else(|| format!("subtask ref {s:?} is not of the form task#index"))?;
        let subtask: usize = idx
            .parse()
            .map_err(|_| format!("subtask ref {s:?} has a non-numeric index"))?;
        if task.is_empty() || subtask == 0 {
            return Err(format!("subtask ref {s:?} is incomplete"));
        }
        Ok(Self::new(task, subtask))
    }
}

impl Serialize for SubtaskRef {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SubtaskRef {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Text(String),
            Record { task_id: String, subtask: usize },
        }
        match Repr::deserialize(d)? {
            Repr::Text(s) => s.parse().map_err(serde::de::Error::custom),
            Repr::Record { task_id, subtask } => Ok(SubtaskRef { task_id, subtask }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegQualityScore {
    pub subtask_ref: SubtaskRef,
    /// `None` only for evaluator errors.
    pub score: Option<u8>,
    pub coherence_notes: String,
    pub alignment_notes: String,
    pub usable: bool,
    #[serde(default)]
    pub repaired: bool,
    #[serde(default)]
    pub evaluator_error: bool,
}

impl SegQualityScore {
    pub fn from_score(subtask_ref: SubtaskRef, score: u8) -> Self {
        let score = score.clamp(1, 5);
        Self {
            subtask_ref,
            score: Some(score),
            coherence_notes: String::new(),
            alignment_notes: String::new(),
            usable: score >= USABLE_THRESHOLD,
            repaired: false,
            evaluator_error: false,
        }
    }
}

/// `{coherence_notes, alignment_notes, score}`. Scores outside 1..5 are
/// clamped and flagged; a non-numeric score is rejected.
pub fn parse_seg_quality(v: &Value, subtask_ref: &SubtaskRef) -> Result<SegQualityScore, String> {
    if !v.is_object() {
        return Err("expected a record".into());
    }
    let raw = v
        .get("score")
        .ok_or("missing \"score\"")
        .and_then(|s| as_int(s).ok_or("\"score\" is not an integer"))?;
    let score = raw.clamp(1, 5) as u8;
    Ok(SegQualityScore {
        subtask_ref: subtask_ref.clone(),
        score: Some(score),
        coherence_notes: get_trimmed(v, "coherence_notes"),
        alignment_notes: get_trimmed(v, "alignment_notes"),
        usable: score >= USABLE_THRESHOLD,
        repaired: raw != score as i64,
        evaluator_error: false,
    })
}

/// Descriptions and actions of the segments on either side of `i`.
pub fn render_neighbor_context(task: &TaskInstance, seg: &Segmentation, i: usize) -> String {
    let steps = task.trajectory.steps();
    let mut out = Vec::new();
    for (label, j) in [("Previous", i.checked_sub(1)), ("Next", Some(i + 1))] {
        match j.and_then(|j| seg.subtask(j)) {
            Some(s) => out.push(format!(
                "{label} subtask ({}): {}\n{}",
                s.span_label(),
                s.description,
                render_steps(&steps[s.start_step - 1..s.end_step])
            )),
            None => out.push(format!("{label} subtask: none")),
        }
    }
    out.join("\n\n")
}

pub fn build_seg_quality_request(
    task: &TaskInstance,
    seg: &Segmentation,
    i: usize,
    env: &StageEnv<'_>,
) -> (ChatRequest, ImageTally) {
    let spec = seg.subtask(i).expect("subtask index checked by caller");
    let current = format!("{} ({})", spec.description, spec.span_label());
    let actions = render_steps(&task.trajectory.steps()[spec.start_step - 1..spec.end_step]);
    let neighbors = render_neighbor_context(task, seg, i);
    let (system, user) = env
        .prompts
        .render(
            TemplateKind::SegQuality,
            &[
                ("task_instruction", task.instruction.as_str()),
                ("current_subtask", current.as_str()),
                ("segment_actions", actions.as_str()),
                ("neighbor_context", neighbors.as_str()),
            ],
        )
        .expect("prompt set validated at configuration time");
    let mut parts = vec![Part::Text(user)];
    let tally = push_segment_images(task, spec, i == seg.k(), env, &mut parts);
    let req = ChatRequest::new(Stage::SegQuality, system, parts).expect("non-empty parts");
    (env.finish(req), tally)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegQualityOutcome {
    pub score: SegQualityScore,
    pub stats: StageStats,
    pub images: ImageTally,
}

/// Scores subtask `i` (1-based). Exhausted retries produce an entry flagged
/// `evaluator_error` with no score.
pub fn score_subtask(
    task: &TaskInstance,
    seg: &Segmentation,
    i: usize,
    env: &StageEnv<'_>,
) -> SegQualityOutcome {
    assert!((1..=seg.k()).contains(&i), "subtask index {i} out of range");
    let r = SubtaskRef::new(&task.task_id, i);
    let (req, images) = build_seg_quality_request(task, seg, i, env);
    match env.call_json(&req, |v| parse_seg_quality(v, &r)) {
        Ok(done) => SegQualityOutcome {
            stats: StageStats::from_completed(&done),
            score: done.value,
            images,
        },
        Err(e) => SegQualityOutcome {
            stats: StageStats::from_exhausted(&e),
            score: SegQualityScore {
                subtask_ref: r,
                score: None,
                coherence_notes: format!("evaluator error: {e}"),
                alignment_notes: String::new(),
                usable: false,
                repaired: false,
                evaluator_error: true,
            },
            images,
        },
    }
}

/// Scores every subtask of one segmentation, in index order.
pub fn score_segmentation(
    task: &TaskInstance,
    seg: &Segmentation,
    env: &StageEnv<'_>,
    parallelism: usize,
) -> Vec<SegQualityOutcome> {
    fan_out(seg.k(), parallelism, |i| score_subtask(task, seg, i, env))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution {
    /// Counts for scores 1..=5.
    pub counts: [usize; 5],
    pub percentages: [f64; 5],
    pub usable_count: usize,
    pub usable_pct: f64,
    pub total: usize,
    pub excluded_errors: usize,
}

impl ScoreDistribution {
    pub fn count(&self, score: u8) -> usize {
        self.counts[(score - 1) as usize]
    }

    pub fn percentage(&self, score: u8) -> f64 {
        self.percentages[(score - 1) as usize]
    }

    /// Percentages at one decimal, rounded by largest remainder so the
    /// displayed row still sums to 100.0.
    pub fn rounded_percentages(&self) -> [f64; 5] {
        let tenths = self.counts.map(|c| 1000 * c as u64);
        let total = self.total.max(1) as u64;
        let mut floor = tenths.map(|t| t / total);
        let short = 1000 - floor.iter().sum::<u64>().min(1000);
        let mut order: Vec<usize> = (0..5).collect();
        order.sort_by_key(|&i| (std::cmp::Reverse(tenths[i] % total), i));
        for &i in order.iter().take(short as usize) {
            floor[i] += 1;
        }
        floor.map(|t| t as f64 / 10.0)
    }
}

/// Histogram over 1..5 and the share of usable (score ≥ 4) entries.
/// Evaluator errors are left out and counted separately.
pub fn score_distribution(scores: &[SegQualityScore]) -> Result<ScoreDistribution, MetaEvalError> {
    let mut counts = [0usize; 5];
    let mut excluded_errors = 0;
    for s in scores {
        match s.score {
            Some(v) if !s.evaluator_error => counts[(v.clamp(1, 5) - 1) as usize] += 1,
            _ => excluded_errors += 1,
        }
    }
    let total: usize = counts.iter().sum();
    if total == 0 {
        return Err(MetaEvalError::EmptyInput);
    }
    let pct = |c: usize| 100.0 * c as f64 / total as f64;
    let usable_count = counts[3] + counts[4];
    Ok(ScoreDistribution {
        counts,
        percentages: counts.map(pct),
        usable_count,
        usable_pct: pct(usable_count),
        total,
        excluded_errors,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanLabel {
    pub subtask_ref: SubtaskRef,
    pub usable: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum LabelError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: duplicate label for {subtask_ref}")]
    Duplicate { line: usize, subtask_ref: SubtaskRef },
}

/// Reads line-delimited `{subtask_ref, usable}` records.
pub fn load_human_labels(path: &Path) -> Result<Vec<HumanLabel>, LabelError> {
    let io = |source| LabelError::Io { path: path.display().to_string(), source };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let label: HumanLabel = serde_json::from_str(&line)
            .map_err(|e| LabelError::Malformed { line: i + 1, message: e.to_string() })?;
        if seen.insert(label.subtask_ref.clone(), i + 1).is_some() {
            return Err(LabelError::Duplicate { line: i + 1, subtask_ref: label.subtask_ref });
        }
        out.push(label);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Agreement {
    pub kappa: KappaDetail,
    pub matched: usize,
    /// Scored subtasks without a human label.
    pub unmatched_scores: Vec<SubtaskRef>,
    /// Human labels without a usable score.
    pub unmatched_labels: Vec<SubtaskRef>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgreementError {
    #[error("no subtask has both a score and a human label")]
    EmptyIntersection,
    #[error(transparent)]
    Kappa(#[from] MetaEvalError),
}

/// Binarizes scores at ≥ 4 and measures agreement with the human labels.
/// Evaluator errors count as unmatched.
pub fn agreement_vs_human(
    scores: &[SegQualityScore],
    labels: &[HumanLabel],
) -> Result<Agreement, AgreementError> {
    let human: BTreeMap<&SubtaskRef, bool> = labels.iter().map(|l| (&l.subtask_ref, l.usable)).collect();
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut matched_refs = BTreeMap::new();
    let mut unmatched_scores = Vec::new();
    for s in scores {
        let Some(score) = s.score.filter(|_| !s.evaluator_error) else {
            continue;
        };
        match human.get(&s.subtask_ref) {
            Some(&h) => {
                a.push(score >= USABLE_THRESHOLD);
                b.push(h);
                matched_refs.insert(&s.subtask_ref, ());
            }
            None => unmatched_scores.push(s.subtask_ref.clone()),
        }
    }
    let unmatched_labels: Vec<SubtaskRef> = labels
        .iter()
        .filter(|l| !matched_refs.contains_key(&l.subtask_ref))
        .map(|l| l.subtask_ref.clone())
        .collect();
    if a.is_empty() {
        return Err(AgreementError::EmptyIntersection);
    }
    if !unmatched_scores.is_empty() || !unmatched_labels.is_empty() {
        tracing::warn!(
            "{} scores and {} labels have no counterpart",
            unmatched_scores.len(),
            unmatched_labels.len()
        );
    }
    Ok(Agreement {
        kappa: cohen_kappa_detail(&a, &b)?,
        matched: a.len(),
        unmatched_scores,
        unmatched_labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn r(i: usize) -> SubtaskRef {
        SubtaskRef::new("t", i)
    }

    #[test]
    fn ref_round_trip() {
        let x = SubtaskRef::new("task#7", 3);
        let s = serde_json::to_string(&x).unwrap();
        assert_eq!(s, "\"task#7#3\"");
        assert_eq!(serde_json::from_str::<SubtaskRef>(&s).unwrap(), x);
        let rec: SubtaskRef = serde_json::from_value(json!({"task_id": "a", "subtask": 2})).unwrap();
        assert_eq!(rec, SubtaskRef::new("a", 2));
        assert!("a#0".parse::<SubtaskRef>().is_err());
        assert!("nohash".parse::<SubtaskRef>().is_err());
    }

    #[test]
    fn score_parsing() {
        let s = parse_seg_quality(&json!({"coherence_notes": "c", "alignment_notes": "a", "score": 5}), &r(1)).unwrap();
        assert!(s.usable && !s.repaired);
        let s = parse_seg_quality(&json!({"score": 3}), &r(1)).unwrap();
        assert!(!s.usable);
        let s = parse_seg_quality(&json!({"score": "7"}), &r(1)).unwrap();
        assert_eq!(s.score, Some(5));
        assert!(s.repaired && s.usable);
        let s = parse_seg_quality(&json!({"score": -2}), &r(1)).unwrap();
        assert_eq!(s.score, Some(1));
        assert!(parse_seg_quality(&json!({"score": "high"}), &r(1)).is_err());
        assert!(parse_seg_quality(&json!({"notes": "x"}), &r(1)).is_err());
    }

    #[test]
    fn ten_score_fixture() {
        let raw = [5u8, 5, 5, 4, 4, 3, 2, 5, 1, 4];
        let scores: Vec<_> = raw.iter().enumerate().map(|(i, s)| SegQualityScore::from_score(r(i + 1), *s)).collect();
        let d = score_distribution(&scores).unwrap();
        assert_eq!(d.counts, [1, 1, 1, 3, 4]);
        assert_eq!(d.percentages, [10.0, 10.0, 10.0, 30.0, 40.0]);
        assert_eq!(d.usable_pct, 70.0);
    }

    #[test]
    fn all_ones_and_errors() {
        let mut scores: Vec<_> = (1..=4).map(|i| SegQualityScore::from_score(r(i), 1)).collect();
        scores.push(SegQualityScore {
            score: None,
            evaluator_error: true,
            ..SegQualityScore::from_score(r(9), 5)
        });
        let d = score_distribution(&scores).unwrap();
        assert_eq!(d.usable_pct, 0.0);
        assert_eq!(d.total, 4);
        assert_eq!(d.excluded_errors, 1);
        assert!(score_distribution(&[]).is_err());
    }

    #[test]
    fn agreement_reports_unmatched() {
        let scores: Vec<_> = [5u8, 4, 2].iter().enumerate().map(|(i, s)| SegQualityScore::from_score(r(i + 1), *s)).collect();
        let labels = vec![
            HumanLabel { subtask_ref: r(1), usable: true },
            HumanLabel { subtask_ref: r(3), usable: false },
            HumanLabel { subtask_ref: r(8), usable: true },
        ];
        let a = agreement_vs_human(&scores, &labels).unwrap();
        assert_eq!(a.matched, 2);
        assert_eq!(a.kappa.kappa, 1.0);
        assert_eq!(a.unmatched_scores, vec![r(2)]);
        assert_eq!(a.unmatched_labels, vec![r(8)]);
        let none = vec![HumanLabel { subtask_ref: SubtaskRef::new("other", 1), usable: true }];
        assert_eq!(agreement_vs_human(&scores, &none), Err(AgreementError::EmptyIntersection));
    }

    proptest! {
        #[test]
        fn usable_matches_threshold(raw in proptest::collection::vec(-3i64..12, 1..60)) {
            let scores: Vec<_> = raw
                .iter()
                .enumerate()
                .map(|(i, s)| parse_seg_quality(&json!({"score": s}), &r(i + 1)).unwrap())
                .collect();
            for s in &scores {
                let v = s.score.unwrap();
                prop_assert!((1..=5).contains(&v));
                prop_assert_eq!(s.usable, v >= 4);
            }
            let d = score_distribution(&scores).unwrap();
            let rounded = d.rounded_percentages();
            prop_assert!((rounded.iter().sum::<f64>() - 100.0).abs() <= 0.2);
            for (r, p) in rounded.iter().zip(d.percentages) {
                prop_assert!((r - p).abs() < 0.1 + 1e-9);
            }
        }
    }
}
