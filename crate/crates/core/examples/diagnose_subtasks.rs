//! Diagnoses each subtask of a failing task and prints the issues found.

use std::path::Path;

use guide::backend::{AuditSink, MockBackend, MockScript, VirtualClock};
use guide::diagnosis::diagnose_all;
use guide::pipeline::{Evaluator, PipelineConfig};
use guide::segmentation::segment_trajectory;
use guide::trajectory::{load_dataset, IngestOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data");
    let ds = load_dataset(&data.join("shop.jsonl"), &IngestOptions::default())?;
    let backend = MockBackend::new(MockScript::load(&data.join("mock_script.json"))?);
    let (clock, audit) = (VirtualClock::new(), AuditSink::Disabled);
    let ev = Evaluator::new(PipelineConfig::default(), &backend, &clock, &audit, &ds.base_dir)?;

    let task = ds.get("shop-02").expect("bundled task");
    let env = ev.env();
    let seg = segment_trajectory(task, &env, 30).map_err(|(e, _)| e)?.segmentation;
    for out in diagnose_all(task, &seg, &env, 3) {
        let d = out.diagnosis;
        println!("subtask {}: {} - {}", d.subtask_index, d.verdict.as_str(), d.reasoning);
        for issue in &d.issues {
            println!("  step {}: {} (fix: {})", issue.step_index, issue.problem, issue.suggested_fix);
        }
    }
    println!("{} model calls", backend.call_count());
    Ok(())
}
