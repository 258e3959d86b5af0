//! Evaluates the bundled dataset against a real chat-completions endpoint.
//!
//!     GUIDE_API_KEY=... GUIDE_LIVE_MODEL=gpt-4o cargo run --example live_backend
//!
//! `GUIDE_LIVE_ENDPOINT` overrides the endpoint URL.

use std::path::Path;

use guide::backend::{AuditSink, HttpBackend, HttpBackendConfig, SystemClock};
use guide::pipeline::{Evaluator, PipelineConfig};
use guide::trajectory::{load_dataset, IngestOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let Ok(model) = std::env::var("GUIDE_LIVE_MODEL") else {
        eprintln!("set GUIDE_LIVE_MODEL and GUIDE_API_KEY to run this example");
        return Ok(());
    };
    let mut http = HttpBackendConfig { model, ..HttpBackendConfig::default() };
    if let Ok(e) = std::env::var("GUIDE_LIVE_ENDPOINT") {
        http.endpoint = e;
    }
    let backend = HttpBackend::new(http);
    if !backend.has_credentials() {
        eprintln!("GUIDE_API_KEY is not set");
        return Ok(());
    }
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data");
    let ds = load_dataset(&data.join("shop.jsonl"), &IngestOptions::default())?;
    let audit = AuditSink::memory();
    let ev = Evaluator::new(PipelineConfig::default(), &backend, &SystemClock, &audit, &ds.base_dir)?;
    for task in ds.items.iter().take(2) {
        let r = ev.evaluate(task);
        println!("{}: success={} ({}) calls={} attempts={}", r.task_id, r.final_verdict.success, r.final_verdict.justification, r.total_calls(), r.total_attempts());
    }
    println!("{} attempts audited", audit.records().len());
    Ok(())
}
