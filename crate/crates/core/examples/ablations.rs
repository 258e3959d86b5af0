//! Runs every variant over the bundled dataset and compares them.

use std::path::Path;

use guide::backend::{AuditSink, MockBackend, MockScript, VirtualClock};
use guide::metrics::compute_metrics;
use guide::pipeline::{Evaluator, PipelineConfig, Variant};
use guide::render::render_metrics_table;
use guide::trajectory::{load_dataset, IngestOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data");
    let ds = load_dataset(&data.join("shop.jsonl"), &IngestOptions::default())?;
    let script = MockScript::load(&data.join("mock_script.json"))?;
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let backend = MockBackend::new(script.clone());
        let (clock, audit) = (VirtualClock::new(), AuditSink::Disabled);
        let ev = Evaluator::new(PipelineConfig::default().with_variant(v), &backend, &clock, &audit, &ds.base_dir)?;
        let pairs: Vec<(bool, bool)> = ds
            .items
            .iter()
            .map(|t| (ev.evaluate(t).final_verdict.success, t.gold_label.unwrap_or(false)))
            .collect();
        println!("{v:<20} {:>2} calls", backend.call_count());
        rows.push((v.to_string(), compute_metrics(&pairs)?));
    }
    println!("\n{}", render_metrics_table(&rows));
    Ok(())
}
