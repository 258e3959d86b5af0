//! Prompt templates with `{placeholder}` substitution and content hashing.
//!
//! Only the placeholders a template declares are substituted, so literal
//! braces in schema examples pass through untouched.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateKind {
    Segment,
    Diagnose,
    BareVerdict,
    Summarize,
    Naive,
    Agenttrek,
    SegQuality,
}

impl TemplateKind {
    pub const ALL: [TemplateKind; 7] = [
        TemplateKind::Segment,
        TemplateKind::Diagnose,
        TemplateKind::BareVerdict,
        TemplateKind::Summarize,
        TemplateKind::Naive,
        TemplateKind::Agenttrek,
        TemplateKind::SegQuality,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TemplateKind::Segment => "segment",
            TemplateKind::Diagnose => "diagnose",
            TemplateKind::BareVerdict => "bare_verdict",
            TemplateKind::Summarize => "summarize",
            TemplateKind::Naive => "naive",
            TemplateKind::Agenttrek => "agenttrek",
            TemplateKind::SegQuality => "seg_quality",
        }
    }

    pub fn placeholders(&self) -> &'static [&'static str] {
        match self {
            TemplateKind::Segment => &["task_instruction", "action_transcript"],
            TemplateKind::Diagnose | TemplateKind::BareVerdict => &[
                "task_instruction",
                "subtask_list",
                "current_subtask",
                "segment_actions",
            ],
            TemplateKind::Summarize => &[
                "task_instruction",
                "diagnostic_evidence",
                "subtask_summaries_secondary",
            ],
            TemplateKind::Naive | TemplateKind::Agenttrek => {
                &["task_instruction", "action_transcript"]
            }
            TemplateKind::SegQuality => &[
                "task_instruction",
                "current_subtask",
                "segment_actions",
                "neighbor_context",
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub system: String,
    pub user: String,
}

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {template} is missing placeholder {{{placeholder}}}")]
    MissingPlaceholder {
        template: &'static str,
        placeholder: &'static str,
    },
    #[error("template {0} is not defined")]
    MissingTemplate(&'static str),
    #[error("cannot read prompt file {path}: {message}")]
    Load { path: String, message: String },
    #[error("no value supplied for placeholder {{{0}}}")]
    MissingValue(&'static str),
}

impl PromptTemplate {
    /// Short content hash identifying this template version.
    pub fn version_hash(&self) -> String {
        let digest = Sha256::new()
            .chain_update(self.system.as_bytes())
            .chain_update([0u8])
            .chain_update(self.user.as_bytes())
            .finalize();
        hex::encode(&digest[..8])
    }

    fn check(&self, kind: TemplateKind) -> Result<(), PromptError> {
        for p in kind.placeholders() {
            if !self.user.contains(&format!("{{{p}}}")) {
                return Err(PromptError::MissingPlaceholder {
                    template: kind.name(),
                    placeholder: p,
                });
            }
        }
        Ok(())
    }
}

/// The full template set used by a pipeline run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    templates: BTreeMap<TemplateKind, PromptTemplate>,
}

impl Default for PromptSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptSet {
    pub fn builtin() -> Self {
        let templates = TemplateKind::ALL
            .iter()
            .map(|k| (*k, builtin_template(*k)))
            .collect();
        Self { templates }
    }

    /// Reads a TOML file with one `[name]` table per template, each holding
    /// `system` and `user` strings. Templates absent from the file keep
    /// their built-in text.
    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let body = std::fs::read_to_string(path).map_err(|e| PromptError::Load {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let overrides: BTreeMap<TemplateKind, PromptTemplate> =
            toml::from_str(&body).map_err(|e| PromptError::Load {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        let mut set = Self::builtin();
        for (kind, template) in overrides {
            template.check(kind)?;
            set.templates.insert(kind, template);
        }
        Ok(set)
    }

    pub fn with_template(
        mut self,
        kind: TemplateKind,
        template: PromptTemplate,
    ) -> Result<Self, PromptError> {
        template.check(kind)?;
        self.templates.insert(kind, template);
        Ok(self)
    }

    pub fn get(&self, kind: TemplateKind) -> Result<&PromptTemplate, PromptError> {
        self.templates
            .get(&kind)
            .ok_or(PromptError::MissingTemplate(kind.name()))
    }

    pub fn validate_for(&self, kinds: &[TemplateKind]) -> Result<(), PromptError> {
        for k in kinds {
            self.get(*k)?.check(*k)?;
        }
        Ok(())
    }

    /// `template name -> version hash`, in a stable order.
    pub fn version_hashes(&self) -> BTreeMap<String, String> {
        self.templates
            .iter()
            .map(|(k, t)| (k.name().to_owned(), t.version_hash()))
            .collect()
    }

    /// Substitutes every declared placeholder of `kind`.
    pub fn render(
        &self,
        kind: TemplateKind,
        values: &[(&'static str, &str)],
    ) -> Result<(String, String), PromptError> {
        let t = self.get(kind)?;
        let mut user = t.user.clone();
        for p in kind.placeholders() {
            let v = values
                .iter()
                .find(|(k, _)| k == p)
                .map(|(_, v)| *v)
                .ok_or(PromptError::MissingValue(p))?;
            user = user.replace(&format!("{{{p}}}"), v);
        }
        Ok((t.system.clone(), user))
    }
}

fn builtin_template(kind: TemplateKind) -> PromptTemplate {
    let (system, user) = match kind {
        TemplateKind::Segment => (
            "You segment GUI agent trajectories into coherent subtasks. Reply with JSON only.",
            r#"Task instruction:
{task_instruction}

Executed actions:
{action_transcript}

Split the actions into consecutive, non-overlapping subtasks. Every step must belong to exactly one subtask and each subtask must contain at least one step. Describe the goal each subtask pursues within the overall task.

Respond with a JSON object of this shape (step numbers are 1-based and inclusive):
{"subtasks": [{"description": "...", "start_step": 1, "end_step": 4}]}"#,
        ),
        TemplateKind::Diagnose => (
            "You diagnose one subtask of a GUI agent trajectory from its actions and screenshots. Reply with JSON only.",
            r#"Task instruction:
{task_instruction}

All subtasks of this trajectory (for context only; do not re-evaluate steps that belong to other subtasks):
{subtask_list}

Subtask under evaluation:
{current_subtask}

Actions in this subtask:
{segment_actions}

Screenshots for this subtask follow, then the final state of the whole trajectory.

Think first, then judge. Respond with a JSON object whose fields appear in exactly this order:
{"reasoning": "step-by-step analysis of what happened", "verdict": "success | partial | fail", "error_analysis": "root cause of any failure or deficiency (required unless verdict is success)", "issues": [{"step": 5, "problem": "...", "root_cause": "...", "suggested_fix": "..."}]}
Use global step numbers in "issues". Leave "issues" empty when nothing went wrong."#,
        ),
        TemplateKind::BareVerdict => (
            "You judge whether one subtask of a GUI agent trajectory was completed. Reply with JSON only.",
            r#"Task instruction:
{task_instruction}

All subtasks of this trajectory:
{subtask_list}

Subtask under evaluation:
{current_subtask}

Actions in this subtask:
{segment_actions}

Respond with a JSON object: {"reasoning": "one line", "verdict": "success | fail"}"#,
        ),
        TemplateKind::Summarize => (
            "You decide whether a GUI agent completed its task, based on per-subtask diagnoses. Reply with JSON only.",
            r#"Task instruction:
{task_instruction}

Diagnostic evidence per subtask (primary evidence):
{diagnostic_evidence}

Subtask descriptions (secondary reference only; when they conflict with the diagnostic evidence or the task instruction, trust the evidence and the instruction):
{subtask_summaries_secondary}

An agent may fail an intermediate subtask and later recover, or complete every subtask yet miss the overall goal. Judge the task as a whole.

Respond with a JSON object: {"reasoning": "...", "success": true, "justification": "one or two sentences"}
"success" must be a JSON boolean."#,
        ),
        TemplateKind::Naive => (
            "You judge whether a GUI agent completed its task. Reply with JSON only.",
            r#"Task instruction:
{task_instruction}

Executed actions:
{action_transcript}

Screenshots of the trajectory follow, if any.

Respond with a JSON object: {"reasoning": "...", "success": true}
"success" must be a JSON boolean."#,
        ),
        TemplateKind::Agenttrek => (
            "You judge whether a GUI agent completed its task from its actions and the final screen. Reply with JSON only.",
            r#"Task instruction:
{task_instruction}

Executed actions:
{action_transcript}

The final screenshot follows, if available.

Respond with a JSON object: {"reasoning": "...", "success": true}
"success" must be a JSON boolean."#,
        ),
        TemplateKind::SegQuality => (
            "You rate the quality of one subtask produced by a trajectory segmenter. Reply with JSON only.",
            r#"Task instruction:
{task_instruction}

Subtask under review:
{current_subtask}

Actions in this subtask:
{segment_actions}

Neighbouring subtasks:
{neighbor_context}

Rate two things: (1) coherence and boundary quality, i.e. whether the steps form one logical unit with sensible start and end points; (2) description-behaviour alignment, i.e. whether the description matches what the steps do.
Give one integer score: 5 highly usable, 4 usable, 3 minor issues, 2 risky, 1 unusable (degenerate split that would mislead diagnosis).

Respond with a JSON object: {"coherence_notes": "...", "alignment_notes": "...", "score": 5}"#,
        ),
    };
    PromptTemplate {
        system: system.to_owned(),
        user: user.to_owned(),
    }
}
