#![allow(dead_code)]

use std::io::Cursor;
use std::path::Path;

use guide::backend::{AuditSink, MockBackend, MockScript, Stage, VirtualClock};
use guide::pipeline::{Evaluator, PipelineConfig, Variant};
use guide::trajectory::{Dataset, ScreenshotRef, Step, TaskInstance, Trajectory};

pub const SEGMENT_3: &str = r#"{"subtasks": [
  {"description": "Open the search page", "start_step": 1, "end_step": 2},
  {"description": "Search for the product", "start_step": 3, "end_step": 5},
  {"description": "Add it to the cart", "start_step": 6, "end_step": 7}
]}"#;

pub const DIAG_SUCCESS: &str = r#"{"reasoning": "The screen shows the expected state.", "verdict": "success", "error_analysis": "", "issues": []}"#;

pub const DIAG_FAIL: &str = r#"```json
{"reasoning": "The wrong item was opened.", "verdict": "fail",
 "error_analysis": "Clicked a sponsored listing instead of the match.",
 "issues": [{"step": 4, "problem": "wrong result clicked", "root_cause": "ad placement", "suggested_fix": "skip sponsored rows"}]}
```"#;

pub const SUMMARY_TRUE: &str = r#"{"reasoning": "All parts done.", "success": true, "justification": "Every subtask reached its goal."}"#;
pub const SUMMARY_FALSE: &str = r#"{"reasoning": "One part failed.", "success": false, "justification": "The product never reached the cart."}"#;
pub const BINARY_TRUE: &str = r#"{"reasoning": "Looks complete.", "success": true}"#;

pub fn actions(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("click(element_{i})")).collect()
}

pub fn text_task(id: &str, n: usize, gold: Option<bool>) -> TaskInstance {
    TaskInstance {
        task_id: id.into(),
        instruction: format!("Buy item {id}"),
        gold_label: gold,
        source_tag: None,
        trajectory: Trajectory::from_actions(actions(n)).unwrap(),
    }
}

pub fn png(w: u32, h: u32) -> Vec<u8> {
    let img = image::DynamicImage::ImageRgb8(image::RgbImage::new(w, h));
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

/// Task whose every observation has a screenshot written under `dir`.
pub fn image_task(dir: &Path, id: &str, n: usize) -> TaskInstance {
    let name = |i: usize| format!("{id}_{i}.png");
    for i in 0..=n {
        std::fs::write(dir.join(name(i)), png(8, 6)).unwrap();
    }
    let steps = actions(n)
        .into_iter()
        .enumerate()
        .map(|(index, a)| Step {
            index,
            action_text: a,
            screenshot_ref: Some(ScreenshotRef(name(index + 1))),
        })
        .collect();
    TaskInstance {
        task_id: id.into(),
        instruction: format!("Buy item {id}"),
        gold_label: Some(true),
        source_tag: None,
        trajectory: Trajectory::new(Some(ScreenshotRef(name(0))), steps).unwrap(),
    }
}

/// Segments 7-step tasks into three subtasks; every model answer succeeds.
pub fn happy_script() -> MockScript {
    MockScript::default()
        .with_stage_default(Stage::Segment, SEGMENT_3)
        .with_stage_default(Stage::Diagnose, DIAG_SUCCESS)
        .with_stage_default(Stage::Summarize, SUMMARY_TRUE)
        .with_stage_default(Stage::Baseline, BINARY_TRUE)
        .with_stage_default(Stage::SegQuality, r#"{"coherence_notes": "clean", "alignment_notes": "matches", "score": 5}"#)
}

/// [`happy_script`] with a different segmentation answer.
pub fn script_with_segments(segment: &str) -> MockScript {
    let mut s = MockScript::default().with_stage_default(Stage::Segment, segment);
    s.rules.extend(happy_script().rules);
    s
}

/// Like [`happy_script`] but the second subtask fails.
pub fn second_fails_script() -> MockScript {
    happy_script()
        .with_contains(Stage::Diagnose, "Subtask 2 of 3", DIAG_FAIL)
        .with_contains(Stage::Summarize, "verdict: fail", SUMMARY_FALSE)
}

pub fn dataset(n_tasks: usize) -> Dataset {
    let items = (0..n_tasks)
        .map(|i| text_task(&format!("task-{i:02}"), 7, Some(i % 3 != 0)))
        .collect();
    Dataset::from_items("fixture", ".", items)
}

pub struct Harness {
    pub backend: MockBackend,
    pub clock: VirtualClock,
    pub audit: AuditSink,
}

impl Harness {
    pub fn new(script: MockScript) -> Self {
        Self {
            backend: MockBackend::new(script),
            clock: VirtualClock::new(),
            audit: AuditSink::memory(),
        }
    }

    pub fn evaluator(&self, config: PipelineConfig, base_dir: &Path) -> Evaluator<'_> {
        Evaluator::new(config, &self.backend, &self.clock, &self.audit, base_dir).unwrap()
    }

    pub fn variant(&self, v: Variant) -> Evaluator<'_> {
        self.evaluator(PipelineConfig::default().with_variant(v), Path::new("."))
    }
}
