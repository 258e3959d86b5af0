use std::collections::BTreeMap;
use std::path::PathBuf;

use serde_json::Value;

use super::config::{PipelineConfig, Variant};
use super::report::{EvaluationReport, ImageReport, Provenance};
use crate::backend::{AuditSink, Backend, ChatRequest, Clock, Part, RetryContext, Stage};
use crate::diagnosis::{diagnose_all, fan_out, judge_subtask_bare, ImageTally};
use crate::media::ImageLoader;
use crate::prompts::TemplateKind;
use crate::segmentation::{segment_trajectory, Segmentation};
use crate::stage::{get_trimmed, StageEnv, StageStats};
use crate::summary::{aggregate_diagnoses, summarize, Evidence, FinalVerdict, VerdictSource};
use crate::trajectory::{action_transcript, TaskInstance};

use super::config::ConfigError;

/// Runs one configured pipeline variant over tasks.
pub struct Evaluator<'a> {
    config: PipelineConfig,
    backend: &'a dyn Backend,
    clock: &'a dyn Clock,
    audit: &'a AuditSink,
    images: ImageLoader,
    provenance: Provenance,
}

impl<'a> Evaluator<'a> {
    /// `base_dir` anchors relative screenshot paths.
    pub fn new(
        config: PipelineConfig,
        backend: &'a dyn Backend,
        clock: &'a dyn Clock,
        audit: &'a AuditSink,
        base_dir: impl Into<PathBuf>,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        let provenance = Provenance {
            config_fingerprint: config.fingerprint(),
            prompt_hashes: config.prompt_hashes(),
            backend: backend.describe(),
            seed: config.seed,
        };
        let images = ImageLoader::new(base_dir, config.images.max_dim);
        Ok(Self { config, backend, clock, audit, images, provenance })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn env(&self) -> StageEnv<'_> {
        StageEnv {
            backend: self.backend,
            retry: RetryContext {
                policy: &self.config.retry,
                clock: self.clock,
                audit: self.audit,
                seed: self.config.seed,
            },
            prompts: &self.config.prompts,
            images: &self.images,
            settings: &self.config.stages,
        }
    }

    /// Evaluates one task. Model failures degrade into flagged reports; this
    /// never fails for a well-formed task.
    pub fn evaluate(&self, task: &TaskInstance) -> EvaluationReport {
        let avail = task.trajectory.image_availability();
        let mut r = Draft::default();
        match self.config.variant {
            Variant::Full | Variant::NoSum | Variant::NoDiag => self.run_segmented(task, &mut r),
            Variant::NoSeg => self.run_no_seg(task, &mut r),
            Variant::Naive => self.run_naive(task, &mut r),
            Variant::AgenttrekBaseline => self.run_agenttrek(task, &mut r),
        }
        let final_verdict = r.final_verdict.expect("every variant sets a verdict");
        EvaluationReport {
            task_id: task.task_id.clone(),
            variant: self.config.variant,
            provenance: self.provenance.clone(),
            repaired: r.repaired
                || r.segmentation.as_ref().is_some_and(Segmentation::repaired)
                || r.diagnoses.iter().flatten().any(|d| d.repaired)
                || r.bare.iter().flatten().any(|b| b.repaired),
            evaluator_error: r.evaluator_error
                || r.diagnoses.iter().flatten().any(|d| d.evaluator_error)
                || r.bare.iter().flatten().any(|b| b.evaluator_error),
            segmentation: r.segmentation,
            diagnoses: r.diagnoses,
            bare_verdicts: r.bare,
            final_verdict,
            stages: r.stages,
            images: ImageReport {
                frames: avail.frames,
                referenced: avail.referenced,
                sent: r.images.sent,
                missing: r.images.missing,
                text_only: r.images.sent == 0,
            },
            notes: r.notes,
        }
    }

    fn segment(&self, task: &TaskInstance, r: &mut Draft) -> Segmentation {
        let env = self.env();
        match segment_trajectory(task, &env, self.config.max_segment_len) {
            Ok(out) => {
                r.stat(Stage::Segment, &out.stats);
                for note in out.segmentation.repair_notes() {
                    r.notes.push(format!("segmentation: {note}"));
                }
                out.segmentation
            }
            Err((e, stats)) => {
                r.stat(Stage::Segment, &stats);
                r.evaluator_error = true;
                r.notes.push(format!(
                    "segmentation failed ({e}); the trajectory is treated as one segment"
                ));
                let single = Segmentation::single(task.trajectory.len(), task.instruction.clone());
                crate::segmentation::enforce_max_segment(&single, self.config.max_segment_len)
            }
        }
    }

    fn run_segmented(&self, task: &TaskInstance, r: &mut Draft) {
        let env = self.env();
        let seg = self.segment(task, r);
        let par = self.config.parallelism.subtasks;
        if self.config.variant == Variant::NoDiag {
            let bare = fan_out(seg.k(), par, |i| judge_subtask_bare(task, &seg, i, &env));
            let verdicts: Vec<_> = bare
                .into_iter()
                .map(|o| {
                    r.stat(Stage::Diagnose, &o.stats);
                    o.verdict
                })
                .collect();
            let out = summarize(task, &seg, Evidence::BareVerdicts(&verdicts), &env);
            r.summary(out);
            r.bare = Some(verdicts);
        } else {
            let diagnoses = self.diagnose(task, &seg, r);
            if self.config.variant == Variant::NoSum {
                r.final_verdict = Some(aggregate_diagnoses(&diagnoses));
            } else {
                let out = summarize(task, &seg, Evidence::Diagnoses(&diagnoses), &env);
                r.summary(out);
            }
            r.diagnoses = Some(diagnoses);
        }
        r.segmentation = Some(seg);
    }

    fn diagnose(
        &self,
        task: &TaskInstance,
        seg: &Segmentation,
        r: &mut Draft,
    ) -> Vec<crate::diagnosis::SubtaskDiagnosis> {
        diagnose_all(task, seg, &self.env(), self.config.parallelism.subtasks)
            .into_iter()
            .map(|o| {
                r.stat(Stage::Diagnose, &o.stats);
                r.images.merge(o.images);
                o.diagnosis
            })
            .collect()
    }

    /// The whole trajectory goes to the diagnostic stage as a single
    /// segment; the segmentation itself is not part of the report.
    fn run_no_seg(&self, task: &TaskInstance, r: &mut Draft) {
        let seg = Segmentation::single(task.trajectory.len(), task.instruction.clone());
        let diagnoses = self.diagnose(task, &seg, r);
        let out = summarize(task, &seg, Evidence::Diagnoses(&diagnoses), &self.env());
        r.summary(out);
        r.diagnoses = Some(diagnoses);
    }

    fn run_naive(&self, task: &TaskInstance, r: &mut Draft) {
        let transcript = action_transcript(&task.trajectory);
        let (system, user) = self
            .config
            .prompts
            .render(
                TemplateKind::Naive,
                &[
                    ("task_instruction", task.instruction.as_str()),
                    ("action_transcript", transcript.as_str()),
                ],
            )
            .expect("validated");
        let mut parts = vec![Part::Text(user)];
        if self.config.naive_text_only {
            r.notes.push("naive variant run text-only".into());
        } else {
            let traj = &task.trajectory;
            for i in 0..=traj.len() {
                let label = if i == 0 {
                    "Initial screen:".to_owned()
                } else {
                    format!("Screenshot after step {i}:")
                };
                match traj.observation(i).and_then(|s| self.images.load(s)) {
                    Some(img) => {
                        parts.push(Part::Text(label));
                        parts.push(img);
                        r.images.sent += 1;
                    }
                    None if i > 0 => {
                        parts.push(Part::Text(format!("[no screenshot for step {i}]")));
                        r.images.missing += 1;
                    }
                    None => {}
                }
            }
        }
        self.single_call(parts, system, VerdictSource::NaiveCall, r);
    }

    fn run_agenttrek(&self, task: &TaskInstance, r: &mut Draft) {
        let transcript = action_transcript(&task.trajectory);
        let (system, user) = self
            .config
            .prompts
            .render(
                TemplateKind::Agenttrek,
                &[
                    ("task_instruction", task.instruction.as_str()),
                    ("action_transcript", transcript.as_str()),
                ],
            )
            .expect("validated");
        let mut parts = vec![Part::Text(user)];
        match task.trajectory.final_observation().and_then(|s| self.images.load(s)) {
            Some(img) => {
                parts.push(Part::Text("Final screenshot:".into()));
                parts.push(img);
                r.images.sent += 1;
            }
            None => {
                parts.push(Part::Text("[no final screenshot available; judge from the actions alone]".into()));
                r.images.missing += 1;
                r.notes.push("final screenshot unavailable; baseline judged text-only".into());
            }
        }
        self.single_call(parts, system, VerdictSource::Baseline, r);
    }

    fn single_call(&self, parts: Vec<Part>, system: String, source: VerdictSource, r: &mut Draft) {
        let env = self.env();
        let req = env.finish(ChatRequest::new(Stage::Baseline, system, parts).expect("text part present"));
        match env.call_json(&req, |v| parse_binary_verdict(v, source)) {
            Ok(done) => {
                r.stat(Stage::Baseline, &StageStats::from_completed(&done));
                r.final_verdict = Some(done.value);
            }
            Err(e) => {
                r.stat(Stage::Baseline, &StageStats::from_exhausted(&e));
                r.evaluator_error = true;
                r.final_verdict = Some(FinalVerdict {
                    success: false,
                    justification: format!("evaluator error: {e}"),
                    derived_from: source,
                });
            }
        }
    }
}

/// `{reasoning, success: bool}` for the single-call evaluators.
pub fn parse_binary_verdict(v: &Value, source: VerdictSource) -> Result<FinalVerdict, String> {
    let success = match v.get("success") {
        Some(Value::Bool(b)) => *b,
        Some(other) => return Err(format!("\"success\" must be a boolean, got {other}")),
        None => return Err("missing \"success\"".into()),
    };
    let reasoning = get_trimmed(v, "reasoning");
    if reasoning.is_empty() {
        return Err("missing or empty \"reasoning\"".into());
    }
    Ok(FinalVerdict { success, justification: reasoning, derived_from: source })
}

#[derive(Default)]
struct Draft {
    segmentation: Option<Segmentation>,
    diagnoses: Option<Vec<crate::diagnosis::SubtaskDiagnosis>>,
    bare: Option<Vec<crate::diagnosis::BareVerdict>>,
    final_verdict: Option<FinalVerdict>,
    stages: BTreeMap<Stage, StageStats>,
    images: ImageTally,
    evaluator_error: bool,
    repaired: bool,
    notes: Vec<String>,
}

impl Draft {
    fn stat(&mut self, stage: Stage, s: &StageStats) {
        self.stages.entry(stage).or_default().merge(s);
    }

    fn summary(&mut self, out: crate::summary::SummaryOutcome) {
        self.stat(Stage::Summarize, &out.stats);
        if out.fell_back {
            self.evaluator_error = true;
            self.notes.push("summary model failed; hard rule applied".into());
        }
        self.final_verdict = Some(out.final_verdict);
    }
}
