//! Loads the bundled dataset and prints its composition.
//!
//!     cargo run --example load_dataset [path/to/data.jsonl]

use std::path::PathBuf;

use guide::trajectory::{action_transcript, dataset_stats, load_dataset, IngestOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("examples/data/shop.jsonl"));
    let ds = load_dataset(&path, &IngestOptions::default())?;
    let stats = dataset_stats(&ds);
    println!("{} tasks, {} success / {} failure, mean length {:.1}", stats.total, stats.success, stats.failure, stats.mean_length);
    for (group, count) in stats.length_histogram.iter().filter(|(_, c)| *c > 0) {
        println!("  {:>6}: {count}", group.label());
    }
    let first = &ds.items[0];
    println!("\n{}: {}\n{}", first.task_id, first.instruction, action_transcript(&first.trajectory));
    for w in &ds.warnings {
        println!("warning: {w}");
    }
    Ok(())
}
