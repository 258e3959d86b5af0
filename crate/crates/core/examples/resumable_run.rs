//! A dataset run that stops partway, then resumes without redoing work.

use std::path::Path;

use guide::backend::{AuditSink, MockBackend, MockScript, VirtualClock};
use guide::pipeline::{evaluate_dataset, Evaluator, PipelineConfig, RunOptions, MANIFEST_FILE};
use guide::trajectory::{load_dataset, IngestOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data");
    let ds = load_dataset(&data.join("shop.jsonl"), &IngestOptions::default())?;
    let backend = MockBackend::new(MockScript::load(&data.join("mock_script.json"))?);
    let (clock, audit) = (VirtualClock::new(), AuditSink::Disabled);
    let ev = Evaluator::new(PipelineConfig::default(), &backend, &clock, &audit, &ds.base_dir)?;

    let out = std::env::temp_dir().join(format!("guide-resume-{}", std::process::id()));
    let first = evaluate_dataset(&ds, &ev, &out, &RunOptions { limit: Some(2), render: true })?;
    println!("first run:  {first:?}, {} calls", backend.call_count());
    backend.clear_log();
    let second = evaluate_dataset(&ds, &ev, &out, &RunOptions { limit: None, render: true })?;
    println!("second run: {second:?}, {} calls", backend.call_count());
    println!("outputs in {}; manifest at {}", out.display(), out.join(MANIFEST_FILE).display());
    Ok(())
}
