//! Task-level aggregation: a model-based holistic summary, and the fixed
//! all-subtasks-must-succeed rule used as its ablation and fallback.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backend::{ChatRequest, Part, RetriesExhausted, Stage};
use crate::diagnosis::{BareVerdict, SubtaskDiagnosis, Verdict};
use crate::prompts::TemplateKind;
use crate::segmentation::Segmentation;
use crate::stage::{get_trimmed, StageEnv, StageStats};
use crate::trajectory::TaskInstance;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictSource {
    ModelSummary,
    HardRule,
    NaiveCall,
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalVerdict {
    pub success: bool,
    pub justification: String,
    pub derived_from: VerdictSource,
}

/// Success iff every verdict is `success`; `partial` counts as failure.
pub fn aggregate_hard_rule(verdicts: &[Verdict]) -> FinalVerdict {
    if verdicts.is_empty() {
        return FinalVerdict {
            success: false,
            justification: "no subtask verdicts to aggregate".into(),
            derived_from: VerdictSource::HardRule,
        };
    }
    let offending: Vec<String> = verdicts
        .iter()
        .enumerate()
        .filter(|(_, v)| !v.is_success())
        .map(|(i, v)| format!("{} ({v})", i + 1))
        .collect();
    let justification = if offending.is_empty() {
        format!("all {} subtasks succeeded", verdicts.len())
    } else {
        format!("non-success subtasks: {}", offending.join(", "))
    };
    FinalVerdict {
        success: offending.is_empty(),
        justification,
        derived_from: VerdictSource::HardRule,
    }
}

pub fn aggregate_diagnoses(diagnoses: &[SubtaskDiagnosis]) -> FinalVerdict {
    let v: Vec<Verdict> = diagnoses.iter().map(|d| d.verdict).collect();
    aggregate_hard_rule(&v)
}

/// What the summary model reasons over.
#[derive(Debug, Clone, Copy)]
pub enum Evidence<'a> {
    Diagnoses(&'a [SubtaskDiagnosis]),
    BareVerdicts(&'a [BareVerdict]),
}

impl Evidence<'_> {
    pub fn len(&self) -> usize {
        match self {
            Evidence::Diagnoses(d) => d.len(),
            Evidence::BareVerdicts(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn verdicts(&self) -> Vec<Verdict> {
        match self {
            Evidence::Diagnoses(d) => d.iter().map(|x| x.verdict).collect(),
            Evidence::BareVerdicts(b) => b.iter().map(|x| x.verdict).collect(),
        }
    }
}

/// Primary evidence block: per subtask, the verdict, the reasoning trace and
/// the step-level issues. Descriptions are deliberately left to the
/// secondary block.
pub fn render_evidence(seg: &Segmentation, evidence: Evidence<'_>) -> String {
    let mut out = String::new();
    let span = |i: usize| {
        seg.subtask(i)
            .map(|s| s.span_label())
            .unwrap_or_else(|| "unknown steps".into())
    };
    match evidence {
        Evidence::Diagnoses(ds) => {
            for d in ds {
                let _ = writeln!(out, "Subtask {} ({}):", d.subtask_index, span(d.subtask_index));
                let _ = writeln!(out, "  verdict: {}", d.verdict);
                let _ = writeln!(out, "  reasoning: {}", d.reasoning);
                if !d.error_analysis.is_empty() {
                    let _ = writeln!(out, "  error analysis: {}", d.error_analysis);
                }
                if d.issues.is_empty() {
                    let _ = writeln!(out, "  issues: none");
                } else {
                    let _ = writeln!(out, "  issues:");
                    for issue in &d.issues {
                        let _ = writeln!(
                            out,
                            "    - step {}: {} | root cause: {} | fix: {}",
                            issue.step_index, issue.problem, issue.root_cause, issue.suggested_fix
                        );
                    }
                }
            }
        }
        Evidence::BareVerdicts(bs) => {
            for b in bs {
                let _ = writeln!(out, "Subtask {} ({}):", b.subtask_index, span(b.subtask_index));
                let _ = writeln!(out, "  verdict: {}", b.verdict);
                let _ = writeln!(out, "  reasoning: {}", b.reasoning);
            }
        }
    }
    out.trim_end().to_owned()
}

pub fn render_secondary(seg: &Segmentation) -> String {
    seg.subtasks()
        .iter()
        .map(|s| format!("{}. {} ({})", s.index, s.description, s.span_label()))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn build_summary_request(
    task: &TaskInstance,
    seg: &Segmentation,
    evidence: Evidence<'_>,
    env: &StageEnv<'_>,
) -> ChatRequest {
    let primary = render_evidence(seg, evidence);
    let secondary = render_secondary(seg);
    let (system, user) = env
        .prompts
        .render(
            TemplateKind::Summarize,
            &[
                ("task_instruction", task.instruction.as_str()),
                ("diagnostic_evidence", primary.as_str()),
                ("subtask_summaries_secondary", secondary.as_str()),
            ],
        )
        .expect("prompt set validated at configuration time");
    env.finish(ChatRequest::new(Stage::Summarize, system, vec![Part::Text(user)]).expect("text part"))
}

/// `{reasoning, success: bool, justification}` with a strict boolean and a
/// non-empty justification.
pub fn parse_summary(v: &Value) -> Result<FinalVerdict, String> {
    let success = match v.get("success") {
        Some(Value::Bool(b)) => *b,
        Some(other) => return Err(format!("\"success\" must be a boolean, got {other}")),
        None => return Err("missing \"success\"".into()),
    };
    let justification = get_trimmed(v, "justification");
    if justification.is_empty() {
        return Err("missing or empty \"justification\"".into());
    }
    Ok(FinalVerdict {
        success,
        justification,
        derived_from: VerdictSource::ModelSummary,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryOutcome {
    pub final_verdict: FinalVerdict,
    pub stats: StageStats,
    /// The model call failed and the hard rule decided.
    pub fell_back: bool,
}

/// Model-based aggregation, falling back to [`aggregate_hard_rule`] when
/// retries run out.
pub fn summarize(
    task: &TaskInstance,
    seg: &Segmentation,
    evidence: Evidence<'_>,
    env: &StageEnv<'_>,
) -> SummaryOutcome {
    let req = build_summary_request(task, seg, evidence, env);
    match env.call_json(&req, parse_summary) {
        Ok(done) => SummaryOutcome {
            stats: StageStats::from_completed(&done),
            final_verdict: done.value,
            fell_back: false,
        },
        Err(e) => fallback(&e, evidence),
    }
}

fn fallback(e: &RetriesExhausted, evidence: Evidence<'_>) -> SummaryOutcome {
    tracing::warn!("summary failed, applying hard rule: {e}");
    let mut verdict = aggregate_hard_rule(&evidence.verdicts());
    verdict.justification = format!(
        "summary model unavailable after {} attempts; hard rule applied: {}",
        e.attempts, verdict.justification
    );
    SummaryOutcome {
        final_verdict: verdict,
        stats: StageStats::from_exhausted(e),
        fell_back: true,
    }
}
