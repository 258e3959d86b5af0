use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::Variant;
use crate::backend::Stage;
use crate::diagnosis::{BareVerdict, SubtaskDiagnosis};
use crate::segmentation::Segmentation;
use crate::stage::StageStats;
use crate::summary::{FinalVerdict, VerdictSource};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_fingerprint: String,
    pub prompt_hashes: BTreeMap<String, String>,
    pub backend: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageReport {
    /// Observation slots, `n + 1`.
    pub frames: usize,
    /// Slots with a screenshot reference.
    pub referenced: usize,
    /// Image parts sent across all calls.
    pub sent: usize,
    /// Placeholders substituted for unreadable or absent screenshots.
    pub missing: usize,
    /// No call carried an image.
    pub text_only: bool,
}

/// Machine-readable outcome for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub task_id: String,
    pub variant: Variant,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<Segmentation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnoses: Option<Vec<SubtaskDiagnosis>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bare_verdicts: Option<Vec<BareVerdict>>,
    pub final_verdict: FinalVerdict,
    pub evaluator_error: bool,
    pub stages: BTreeMap<Stage, StageStats>,
    pub images: ImageReport,
    pub repaired: bool,
    #[serde(default)]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("report for {task_id} ({variant}) is malformed: {message}")]
pub struct ReportSchemaError {
    pub task_id: String,
    pub variant: Variant,
    pub message: String,
}

impl EvaluationReport {
    /// Checks the variant's presence rules and internal consistency.
    pub fn validate(&self) -> Result<(), ReportSchemaError> {
        let fail = |message: String| {
            Err(ReportSchemaError {
                task_id: self.task_id.clone(),
                variant: self.variant,
                message,
            })
        };
        let v = self.variant;
        if self.segmentation.is_some() != v.has_segmentation() {
            return fail(format!("segmentation presence must be {}", v.has_segmentation()));
        }
        if self.diagnoses.is_some() != v.has_diagnoses() {
            return fail(format!("diagnoses presence must be {}", v.has_diagnoses()));
        }
        if self.bare_verdicts.is_some() != v.has_bare_verdicts() {
            return fail(format!("bare verdict presence must be {}", v.has_bare_verdicts()));
        }
        let expected_k = match (&self.segmentation, v) {
            (Some(seg), _) => Some(seg.k()),
            (None, Variant::NoSeg) => Some(1),
            _ => None,
        };
        let listed: Option<Vec<usize>> = self
            .diagnoses
            .as_ref()
            .map(|d| d.iter().map(|x| x.subtask_index).collect())
            .or_else(|| self.bare_verdicts.as_ref().map(|b| b.iter().map(|x| x.subtask_index).collect()));
        if let (Some(k), Some(idx)) = (expected_k, listed) {
            if idx != (1..=k).collect::<Vec<_>>() {
                return fail(format!("expected subtask entries 1..={k}, found {idx:?}"));
            }
        }
        let fv = &self.final_verdict;
        if fv.derived_from == VerdictSource::ModelSummary && fv.justification.trim().is_empty() {
            return fail("model summary without justification".into());
        }
        let allowed: &[VerdictSource] = match v {
            Variant::Full | Variant::NoSeg | Variant::NoDiag => {
                &[VerdictSource::ModelSummary, VerdictSource::HardRule]
            }
            Variant::NoSum => &[VerdictSource::HardRule],
            Variant::Naive => &[VerdictSource::NaiveCall],
            Variant::AgenttrekBaseline => &[VerdictSource::Baseline],
        };
        if !allowed.contains(&fv.derived_from) {
            return fail(format!("final verdict source {:?} not valid here", fv.derived_from));
        }
        Ok(())
    }

    pub fn total_calls(&self) -> u32 {
        self.stages.values().map(|s| s.calls).sum()
    }

    pub fn total_attempts(&self) -> u32 {
        self.stages.values().map(|s| s.attempts).sum()
    }
}
