//! Boundary normalization on messy proposals, then a model-driven split of
//! one task.

use std::path::Path;

use guide::backend::{AuditSink, MockBackend, MockScript, VirtualClock};
use guide::pipeline::{Evaluator, PipelineConfig};
use guide::segmentation::{enforce_max_segment, normalize_boundaries, segment_trajectory};
use guide::trajectory::{load_dataset, IngestOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let descs: Vec<String> = ["search", "pick", "checkout"].map(String::from).to_vec();
    for raw in [vec![0, 3, 5, 9], vec![9, 3, 3, 42, -1], vec![]] {
        let seg = normalize_boundaries(&raw, 9, &descs, "whole task");
        println!("{raw:?} -> {:?} {:?}", seg.boundaries(), seg.repair_notes());
    }
    let long = normalize_boundaries(&[0, 70], 70, &["scroll the feed".into()], "x");
    let split = enforce_max_segment(&long, 30);
    for s in split.subtasks() {
        println!("  {} {}", s.span_label(), s.description);
    }

    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data");
    let ds = load_dataset(&data.join("shop.jsonl"), &IngestOptions::default())?;
    let backend = MockBackend::new(MockScript::load(&data.join("mock_script.json"))?);
    let (clock, audit) = (VirtualClock::new(), AuditSink::Disabled);
    let ev = Evaluator::new(PipelineConfig::default(), &backend, &clock, &audit, &ds.base_dir)?;
    let task = &ds.items[0];
    let out = segment_trajectory(task, &ev.env(), ev.config().max_segment_len).map_err(|(e, _)| e)?;
    println!("\n{}: {}", task.task_id, task.instruction);
    for s in out.segmentation.subtasks() {
        println!("  {}. {} ({})", s.index, s.description, s.span_label());
    }
    Ok(())
}
