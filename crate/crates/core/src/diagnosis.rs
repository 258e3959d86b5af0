//! Subtask diagnosis: a verdict, an error analysis and step-level corrective
//! issues for one segment, judged with the whole subtask list in view.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{ChatRequest, Part, RetriesExhausted, Stage};
use crate::prompts::TemplateKind;
use crate::segmentation::{Segmentation, SubtaskSpec};
use crate::stage::{as_int, get_str, get_trimmed, key_position, StageEnv, StageStats};
use crate::trajectory::{render_steps, TaskInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Success,
    Partial,
    Fail,
}

impl Verdict {
    pub const ALL: [Verdict; 3] = [Verdict::Success, Verdict::Partial, Verdict::Fail];

    pub fn is_success(&self) -> bool {
        matches!(self, Verdict::Success)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Success => "success",
            Verdict::Partial => "partial",
            Verdict::Fail => "fail",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verdict {
    type Err = String;

    /// Case-insensitive, with common synonyms.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .trim()
            .trim_matches(|c: char| c == '.' || c == '"' || c == '\'')
            .to_lowercase()
            .replace(['_', '-'], " ");
        match norm.as_str() {
            "success" | "succeeded" | "successful" | "succeed" | "completed" | "complete"
            | "pass" | "passed" => Ok(Verdict::Success),
            "partial" | "partially" | "partial success" | "partially completed"
            | "partially successful" | "partially complete" => Ok(Verdict::Partial),
            "fail" | "failure" | "failed" | "unsuccessful" => Ok(Verdict::Fail),
            _ => Err(format!("unrecognized verdict {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepIssue {
    /// Global 1-based action index.
    pub step_index: usize,
    pub problem: String,
    pub root_cause: String,
    pub suggested_fix: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskDiagnosis {
    pub subtask_index: usize,
    pub verdict: Verdict,
    pub reasoning: String,
    pub error_analysis: String,
    pub issues: Vec<StepIssue>,
    pub repaired: bool,
    #[serde(default)]
    pub evaluator_error: bool,
}

impl SubtaskDiagnosis {
    /// Stand-in used when the model never produced a valid diagnosis.
    pub fn evaluator_error(subtask_index: usize, err: &RetriesExhausted) -> Self {
        Self {
            subtask_index,
            verdict: Verdict::Fail,
            reasoning: format!("no valid diagnosis after {} attempts", err.attempts),
            error_analysis: format!("evaluator error: {err}"),
            issues: Vec::new(),
            repaired: false,
            evaluator_error: true,
        }
    }
}

/// Validates a diagnosis record against the span `[start, end]`.
///
/// `reasoning` must come before `verdict` and be non-empty; non-success
/// verdicts need an error analysis. Issue steps outside the span are clamped
/// into it and the diagnosis is marked repaired.
pub fn parse_diagnosis(
    v: &Value,
    subtask_index: usize,
    span: (usize, usize),
) -> Result<SubtaskDiagnosis, String> {
    if !v.is_object() {
        return Err("expected a record".into());
    }
    let reasoning = get_trimmed(v, "reasoning");
    if reasoning.is_empty() {
        return Err("missing or empty \"reasoning\"".into());
    }
    let verdict: Verdict = get_str(v, "verdict")
        .ok_or("missing \"verdict\"")?
        .parse()?;
    match (key_position(v, "reasoning"), key_position(v, "verdict")) {
        (Some(r), Some(d)) if r < d => {}
        _ => return Err("\"reasoning\" must precede \"verdict\"".into()),
    }
    let error_analysis = get_trimmed(v, "error_analysis");
    if !verdict.is_success() && error_analysis.is_empty() {
        return Err(format!("verdict {verdict} requires a non-empty \"error_analysis\""));
    }

    let (start, end) = span;
    let mut repaired = false;
    let mut issues = Vec::new();
    match v.get("issues") {
        None | Some(Value::Null) => {}
        Some(Value::Array(items)) => {
            for item in items {
                let step = item
                    .get("step")
                    .or_else(|| item.get("step_index"))
                    .and_then(as_int);
                let step_index = match step {
                    Some(s) if (start as i64..=end as i64).contains(&s) => s as usize,
                    Some(s) => {
                        repaired = true;
                        s.clamp(start as i64, end as i64) as usize
                    }
                    None => {
                        repaired = true;
                        start
                    }
                };
                issues.push(StepIssue {
                    step_index,
                    problem: get_trimmed(item, "problem"),
                    root_cause: get_trimmed(item, "root_cause"),
                    suggested_fix: get_trimmed(item, "suggested_fix"),
                });
            }
        }
        Some(_) => return Err("\"issues\" must be a list".into()),
    }
    Ok(SubtaskDiagnosis {
        subtask_index,
        verdict,
        reasoning,
        error_analysis,
        issues,
        repaired,
        evaluator_error: false,
    })
}

/// Subtask list with the current one marked.
pub fn render_subtask_list(seg: &Segmentation, current: usize) -> String {
    seg.subtasks()
        .iter()
        .map(|s| {
            let mark = if s.index == current { "  <- current" } else { "" };
            format!("{}. {} ({}){mark}", s.index, s.description, s.span_label())
        })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render_current_subtask(seg: &Segmentation, spec: &SubtaskSpec) -> String {
    format!(
        "Subtask {} of {}: {} ({})",
        spec.index,
        seg.k(),
        spec.description,
        spec.span_label()
    )
}

/// Screenshot accounting for one request.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageTally {
    pub sent: usize,
    pub missing: usize,
}

impl ImageTally {
    pub fn merge(&mut self, o: ImageTally) {
        self.sent += o.sent;
        self.missing += o.missing;
    }
}

/// Appends the segment's frames: the starting observation when available,
/// each post-action screenshot (or a placeholder), then the final state.
pub(crate) fn push_segment_images(
    task: &TaskInstance,
    spec: &SubtaskSpec,
    is_last: bool,
    env: &StageEnv<'_>,
    parts: &mut Vec<Part>,
) -> ImageTally {
    let traj = &task.trajectory;
    let mut tally = ImageTally::default();
    let start_obs = spec.start_step - 1;
    if let Some(img) = traj.observation(start_obs).and_then(|r| env.images.load(r)) {
        parts.push(Part::Text(if start_obs == 0 {
            "Initial screen before step 1:".into()
        } else {
            format!("Screen before step {} (after step {start_obs}):", spec.start_step)
        }));
        parts.push(img);
        tally.sent += 1;
    }
    for step in spec.start_step..=spec.end_step {
        match traj.observation(step).and_then(|r| env.images.load(r)) {
            Some(img) => {
                parts.push(Part::Text(format!("Screenshot after step {step}:")));
                parts.push(img);
                tally.sent += 1;
            }
            None => {
                parts.push(Part::Text(format!("[no screenshot for step {step}]")));
                tally.missing += 1;
            }
        }
    }
    if is_last {
        parts.push(Part::Text(
            "The last screenshot above is the final state of the trajectory.".into(),
        ));
    } else {
        match traj.final_observation().and_then(|r| env.images.load(r)) {
            Some(img) => {
                parts.push(Part::Text(format!(
                    "Final state of the trajectory (after step {}):",
                    traj.len()
                )));
                parts.push(img);
                tally.sent += 1;
            }
            None => {
                parts.push(Part::Text("[no final-state screenshot]".into()));
                tally.missing += 1;
            }
        }
    }
    tally
}

pub(crate) fn build_subtask_request(
    kind: TemplateKind,
    task: &TaskInstance,
    seg: &Segmentation,
    i: usize,
    env: &StageEnv<'_>,
    with_images: bool,
) -> (ChatRequest, ImageTally) {
    let spec = seg.subtask(i).expect("subtask index checked by caller");
    let steps = &task.trajectory.steps()[spec.start_step - 1..spec.end_step];
    let list = render_subtask_list(seg, i);
    let current = render_current_subtask(seg, spec);
    let actions = render_steps(steps);
    let (system, user) = env
        .prompts
        .render(
            kind,
            &[
                ("task_instruction", task.instruction.as_str()),
                ("subtask_list", list.as_str()),
                ("current_subtask", current.as_str()),
                ("segment_actions", actions.as_str()),
            ],
        )
        .expect("prompt set validated at configuration time");
    let mut parts = vec![Part::Text(user)];
    let tally = if with_images {
        push_segment_images(task, spec, i == seg.k(), env, &mut parts)
    } else {
        ImageTally::default()
    };
    let req = ChatRequest::new(Stage::Diagnose, system, parts).expect("non-empty parts");
    (env.finish(req), tally)
}

pub fn build_diagnosis_request(
    task: &TaskInstance,
    seg: &Segmentation,
    i: usize,
    env: &StageEnv<'_>,
) -> (ChatRequest, ImageTally) {
    build_subtask_request(TemplateKind::Diagnose, task, seg, i, env, true)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosisOutcome {
    pub diagnosis: SubtaskDiagnosis,
    pub stats: StageStats,
    pub images: ImageTally,
}

/// Diagnoses subtask `i` (1-based) of `seg`.
pub fn diagnose_subtask(
    task: &TaskInstance,
    seg: &Segmentation,
    i: usize,
    env: &StageEnv<'_>,
) -> Result<DiagnosisOutcome, (RetriesExhausted, StageStats, ImageTally)> {
    assert!(
        (1..=seg.k()).contains(&i),
        "subtask index {i} out of range 1..={}",
        seg.k()
    );
    assert_eq!(seg.n(), task.trajectory.len(), "segmentation does not match trajectory");
    let spec = seg.subtask(i).unwrap();
    let span = (spec.start_step, spec.end_step);
    let (req, images) = build_diagnosis_request(task, seg, i, env);
    match env.call_json(&req, |v| parse_diagnosis(v, i, span)) {
        Ok(done) => Ok(DiagnosisOutcome {
            stats: StageStats::from_completed(&done),
            diagnosis: done.value,
            images,
        }),
        Err(e) => {
            let stats = StageStats::from_exhausted(&e);
            Err((e, stats, images))
        }
    }
}

/// Runs `job(i)` for `i` in `1..=k` on up to `parallelism` threads and
/// returns results in index order.
pub(crate) fn fan_out<T: Send>(k: usize, parallelism: usize, job: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = parallelism.clamp(1, k.max(1));
    if workers == 1 {
        return (1..=k).map(&job).collect();
    }
    let next = AtomicUsize::new(1);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..k).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i > k {
                    break;
                }
                let out = job(i);
                slots.lock().unwrap()[i - 1] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|o| o.expect("every index visited"))
        .collect()
}

/// Diagnoses every subtask. A subtask whose retries run out becomes a
/// synthetic `fail` diagnosis flagged `evaluator_error`.
pub fn diagnose_all(
    task: &TaskInstance,
    seg: &Segmentation,
    env: &StageEnv<'_>,
    parallelism: usize,
) -> Vec<DiagnosisOutcome> {
    fan_out(seg.k(), parallelism, |i| match diagnose_subtask(task, seg, i, env) {
        Ok(d) => d,
        Err((e, stats, images)) => {
            tracing::warn!(task = %task.task_id, subtask = i, "diagnosis failed: {e}");
            DiagnosisOutcome {
                diagnosis: SubtaskDiagnosis::evaluator_error(i, &e),
                stats,
                images,
            }
        }
    })
}

/// Verdict-only judgment used when error analysis is ablated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BareVerdict {
    pub subtask_index: usize,
    pub verdict: Verdict,
    pub reasoning: String,
    #[serde(default)]
    pub repaired: bool,
    #[serde(default)]
    pub evaluator_error: bool,
}

/// `{reasoning, verdict: success|fail}`. A `partial` answer is read as
/// `fail` and flagged repaired.
pub fn parse_bare_verdict(v: &Value, subtask_index: usize) -> Result<BareVerdict, String> {
    if !v.is_object() {
        return Err("expected a record".into());
    }
    let reasoning = get_trimmed(v, "reasoning");
    if reasoning.is_empty() {
        return Err("missing or empty \"reasoning\"".into());
    }
    let verdict: Verdict = get_str(v, "verdict")
        .ok_or("missing \"verdict\"")?
        .parse()?;
    let repaired = verdict == Verdict::Partial;
    Ok(BareVerdict {
        subtask_index,
        verdict: if repaired { Verdict::Fail } else { verdict },
        reasoning,
        repaired,
        evaluator_error: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BareVerdictOutcome {
    pub verdict: BareVerdict,
    pub stats: StageStats,
}

/// Binary judgment of subtask `i` from its text alone; no screenshots, no
/// error analysis. Exhausted retries yield a flagged `fail`.
pub fn judge_subtask_bare(
    task: &TaskInstance,
    seg: &Segmentation,
    i: usize,
    env: &StageEnv<'_>,
) -> BareVerdictOutcome {
    let (req, _) = build_subtask_request(TemplateKind::BareVerdict, task, seg, i, env, false);
    match env.call_json(&req, |v| parse_bare_verdict(v, i)) {
        Ok(done) => BareVerdictOutcome {
            stats: StageStats::from_completed(&done),
            verdict: done.value,
        },
        Err(e) => BareVerdictOutcome {
            stats: StageStats::from_exhausted(&e),
            verdict: BareVerdict {
                subtask_index: i,
                verdict: Verdict::Fail,
                reasoning: format!("evaluator error: {e}"),
                repaired: false,
                evaluator_error: true,
            },
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn verdict_synonyms() {
        assert_eq!("succeeded".parse::<Verdict>().unwrap(), Verdict::Success);
        assert_eq!("SUCCESS".parse::<Verdict>().unwrap(), Verdict::Success);
        assert_eq!("Partially".parse::<Verdict>().unwrap(), Verdict::Partial);
        assert_eq!("partial success".parse::<Verdict>().unwrap(), Verdict::Partial);
        assert_eq!("partial_success".parse::<Verdict>().unwrap(), Verdict::Partial);
        assert_eq!("failure".parse::<Verdict>().unwrap(), Verdict::Fail);
        assert_eq!("Failed".parse::<Verdict>().unwrap(), Verdict::Fail);
        assert!("maybe".parse::<Verdict>().is_err());
    }

    #[test]
    fn success_pass_through() {
        let v = json!({"reasoning": "goal visible", "verdict": "success", "error_analysis": "", "issues": []});
        let d = parse_diagnosis(&v, 1, (1, 4)).unwrap();
        assert_eq!(d.verdict, Verdict::Success);
        assert!(d.issues.is_empty());
        assert!(!d.repaired);
    }

    #[test]
    fn out_of_span_issue_is_clamped() {
        let v = json!({
            "reasoning": "r", "verdict": "fail", "error_analysis": "wrong item",
            "issues": [{"step": 3, "problem": "p", "root_cause": "c", "suggested_fix": "f"}]
        });
        let d = parse_diagnosis(&v, 2, (5, 9)).unwrap();
        assert_eq!(d.issues[0].step_index, 5);
        assert!(d.repaired);
        let v = json!({
            "reasoning": "r", "verdict": "fail", "error_analysis": "e",
            "issues": [{"step": "12", "problem": "p"}]
        });
        assert_eq!(parse_diagnosis(&v, 2, (5, 9)).unwrap().issues[0].step_index, 9);
    }

    #[test]
    fn schema_gate() {
        let v = json!({"reasoning": "r", "verdict": "partial", "error_analysis": ""});
        assert!(parse_diagnosis(&v, 1, (1, 2)).is_err());
        let v = json!({"verdict": "success", "reasoning": "r"});
        assert!(parse_diagnosis(&v, 1, (1, 2)).unwrap_err().contains("precede"));
        let v = json!({"reasoning": " ", "verdict": "success"});
        assert!(parse_diagnosis(&v, 1, (1, 2)).is_err());
        let v = json!({"reasoning": "r", "verdict": "success", "issues": "none"});
        assert!(parse_diagnosis(&v, 1, (1, 2)).is_err());
    }

    #[test]
    fn bare_verdict_schema() {
        let b = parse_bare_verdict(&json!({"reasoning": "r", "verdict": "partially"}), 2).unwrap();
        assert_eq!(b.verdict, Verdict::Fail);
        assert!(b.repaired);
        assert!(parse_bare_verdict(&json!({"verdict": "success"}), 1).is_err());
    }

    #[test]
    fn fan_out_keeps_index_order() {
        let out = fan_out(9, 4, |i| {
            std::thread::sleep(std::time::Duration::from_millis((10 - i as u64) * 2));
            i * 10
        });
        assert_eq!(out, (1..=9).map(|i| i * 10).collect::<Vec<_>>());
        assert!(fan_out(0, 3, |i| i).is_empty());
    }

    #[test]
    fn subtask_list_marks_current() {
        let seg = Segmentation::from_boundaries(vec![0, 2, 5], 5, vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(
            render_subtask_list(&seg, 2),
            "1. a (steps 1-2)\n2. b (steps 3-5)  <- current"
        );
        assert_eq!(
            render_current_subtask(&seg, seg.subtask(2).unwrap()),
            "Subtask 2 of 2: b (steps 3-5)"
        );
    }
}
