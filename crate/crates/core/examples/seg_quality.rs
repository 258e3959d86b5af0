//! Rates segmentation quality per subtask and checks it against human
//! labels.

use std::path::Path;

use guide::backend::{AuditSink, MockBackend, MockScript, VirtualClock};
use guide::pipeline::{Evaluator, PipelineConfig};
use guide::render::{render_agreement, render_score_distribution};
use guide::seg_quality::{agreement_vs_human, load_human_labels, score_distribution, score_segmentation};
use guide::segmentation::segment_trajectory;
use guide::trajectory::{load_dataset, IngestOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data");
    let ds = load_dataset(&data.join("shop.jsonl"), &IngestOptions::default())?;
    let backend = MockBackend::new(MockScript::load(&data.join("mock_script.json"))?);
    let (clock, audit) = (VirtualClock::new(), AuditSink::Disabled);
    let ev = Evaluator::new(PipelineConfig::default(), &backend, &clock, &audit, &ds.base_dir)?;
    let env = ev.env();

    let mut scores = Vec::new();
    for task in &ds.items {
        let seg = segment_trajectory(task, &env, 30).map_err(|(e, _)| e)?.segmentation;
        scores.extend(score_segmentation(task, &seg, &env, 3).into_iter().map(|o| o.score));
    }
    println!("{}", render_score_distribution(&score_distribution(&scores)?));
    let labels = load_human_labels(&data.join("labels.jsonl"))?;
    println!("{}", render_agreement(&agreement_vs_human(&scores, &labels)?));
    Ok(())
}
