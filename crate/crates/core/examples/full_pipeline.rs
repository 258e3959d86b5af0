//! Evaluates one task end to end and prints the markdown report.
//!
//!     cargo run --example full_pipeline [task_id]

use std::path::Path;

use guide::backend::{AuditSink, MockBackend, MockScript, VirtualClock};
use guide::pipeline::{Evaluator, PipelineConfig};
use guide::render::render_report;
use guide::trajectory::{load_dataset, IngestOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let id = std::env::args().nth(1).unwrap_or_else(|| "shop-04".into());
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data");
    let config = PipelineConfig::load(&data.join("config.toml"))?;
    let ds = load_dataset(&data.join("shop.jsonl"), &IngestOptions::default())?;
    let script = MockScript::load(config.backend.mock_script.as_deref().expect("config names a script"))?;
    let backend = MockBackend::new(script);
    let (clock, audit) = (VirtualClock::new(), AuditSink::Disabled);
    let ev = Evaluator::new(config, &backend, &clock, &audit, &ds.base_dir)?;

    let task = ds.get(&id).ok_or_else(|| format!("no task {id}"))?;
    let report = ev.evaluate(task);
    report.validate()?;
    println!("{}", render_report(&report));
    Ok(())
}
