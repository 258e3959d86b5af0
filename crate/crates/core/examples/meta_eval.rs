//! Scores reports against gold labels: overall, by trajectory length, and
//! agreement between two judges.

use std::path::Path;

use guide::backend::{AuditSink, MockBackend, MockScript, VirtualClock};
use guide::metrics::{cohen_kappa_detail, compute_metrics, metrics_by_group};
use guide::pipeline::{Evaluator, PipelineConfig, Variant};
use guide::render::{render_group_table, render_metrics_table};
use guide::trajectory::{load_dataset, IngestOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let data = Path::new(env!("CARGO_MANIFEST_DIR")).join("examples/data");
    let ds = load_dataset(&data.join("shop.jsonl"), &IngestOptions::default())?;
    let script = MockScript::load(&data.join("mock_script.json"))?;
    let run = |v: Variant| -> Result<_, Box<dyn std::error::Error>> {
        let backend = MockBackend::new(script.clone());
        let (clock, audit) = (VirtualClock::new(), AuditSink::Disabled);
        let ev = Evaluator::new(PipelineConfig::default().with_variant(v), &backend, &clock, &audit, &ds.base_dir)?;
        Ok(ds.items.iter().map(|t| ev.evaluate(t)).collect::<Vec<_>>())
    };
    let full = run(Variant::Full)?;
    let naive = run(Variant::Naive)?;

    let pairs: Vec<_> = full.iter().zip(&ds.items).map(|(r, t)| (r.final_verdict.success, t.gold_label.unwrap())).collect();
    println!("{}", render_metrics_table(&[("full".into(), compute_metrics(&pairs)?)]));
    println!("{}", render_group_table(&metrics_by_group(&full, &ds, true)?));

    let a: Vec<bool> = full.iter().map(|r| r.final_verdict.success).collect();
    let b: Vec<bool> = naive.iter().map(|r| r.final_verdict.success).collect();
    let k = cohen_kappa_detail(&a, &b)?;
    println!("full vs naive: kappa {:.3} (observed {:.3}, chance {:.3})", k.kappa, k.observed, k.expected);
    Ok(())
}
