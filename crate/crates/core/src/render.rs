//! Markdown rendering of evaluation reports and run-level tables.

use std::fmt::Write as _;

use crate::diagnosis::Verdict;
use crate::metrics::{GroupTable, MetricsSummary};
use crate::pipeline::EvaluationReport;
use crate::seg_quality::{Agreement, ScoreDistribution};
use crate::summary::VerdictSource;

pub fn verdict_badge(v: Verdict) -> &'static str {
    match v {
        Verdict::Success => "**[SUCCESS]**",
        Verdict::Partial => "**[PARTIAL]**",
        Verdict::Fail => "**[FAIL]**",
    }
}

fn source_label(s: VerdictSource) -> &'static str {
    match s {
        VerdictSource::ModelSummary => "model summary",
        VerdictSource::HardRule => "hard rule",
        VerdictSource::NaiveCall => "single naive call",
        VerdictSource::Baseline => "final-screenshot baseline",
    }
}

fn yes_no(b: bool) -> &'static str {
    if b { "yes" } else { "no" }
}

/// Model text is quoted line by line so it cannot open headings.
fn quote(text: &str) -> String {
    text.lines().map(|l| format!("> {l}")).collect::<Vec<_>>().join("\n")
}

/// Renders one report. The output depends on nothing but the report.
pub fn render_report(r: &EvaluationReport) -> String {
    let mut out = String::new();
    let fv = &r.final_verdict;
    let _ = writeln!(out, "# Task `{}`\n", r.task_id);
    let _ = writeln!(out, "- Variant: `{}`", r.variant);
    let _ = writeln!(
        out,
        "- Final verdict: {} ({})",
        if fv.success { "SUCCESS" } else { "FAILURE" },
        source_label(fv.derived_from)
    );
    let _ = writeln!(out, "- Evaluator error: {}", yes_no(r.evaluator_error));
    let _ = writeln!(out, "- Repaired output: {}", yes_no(r.repaired));
    let _ = writeln!(out, "\n## Final justification\n\n{}\n", quote(&fv.justification));

    let describe = |i: usize| -> String {
        match &r.segmentation {
            Some(seg) => seg
                .subtask(i)
                .map(|s| format!("{} ({})", s.description, s.span_label()))
                .unwrap_or_else(|| "unknown subtask".into()),
            None => {
                let n = r.images.frames.saturating_sub(1);
                format!("Whole trajectory (steps 1-{n})")
            }
        }
    };

    if let Some(seg) = &r.segmentation {
        let _ = writeln!(
            out,
            "## Segmentation\n\n{} subtasks, boundaries {:?}\n",
            seg.k(),
            seg.boundaries()
        );
        for note in seg.repair_notes() {
            let _ = writeln!(out, "- repair: {note}");
        }
        if !seg.repair_notes().is_empty() {
            out.push('\n');
        }
    }

    if let Some(ds) = &r.diagnoses {
        let _ = writeln!(out, "## Subtasks\n");
        for d in ds {
            let _ = writeln!(out, "### {}. {} {}\n", d.subtask_index, describe(d.subtask_index), verdict_badge(d.verdict));
            if d.evaluator_error {
                let _ = writeln!(out, "_Evaluator error: no valid diagnosis was obtained._\n");
            }
            let _ = writeln!(out, "Reasoning:\n\n{}\n", quote(&d.reasoning));
            if !d.error_analysis.is_empty() {
                let _ = writeln!(out, "Error analysis:\n\n{}\n", quote(&d.error_analysis));
            }
            if !d.issues.is_empty() {
                let _ = writeln!(out, "Issues:\n");
                for issue in &d.issues {
                    let _ = writeln!(out, "- Step {}: {}", issue.step_index, one_line(&issue.problem));
                    let _ = writeln!(out, "  - Root cause: {}", one_line(&issue.root_cause));
                    let _ = writeln!(out, "  - Suggested fix: {}", one_line(&issue.suggested_fix));
                }
                out.push('\n');
            }
        }
    }
    if let Some(bs) = &r.bare_verdicts {
        let _ = writeln!(out, "## Subtasks\n");
        for b in bs {
            let _ = writeln!(out, "### {}. {} {}\n", b.subtask_index, describe(b.subtask_index), verdict_badge(b.verdict));
            let _ = writeln!(out, "Reasoning:\n\n{}\n", quote(&b.reasoning));
        }
    }

    let _ = writeln!(out, "## Stages\n");
    let _ = writeln!(out, "| stage | calls | attempts | failed | input tokens | output tokens | ms |");
    let _ = writeln!(out, "|---|---:|---:|---:|---:|---:|---:|");
    for (stage, s) in &r.stages {
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {} | {} |",
            stage.as_str(),
            s.calls,
            s.attempts,
            s.failed_calls,
            s.usage.input_tokens,
            s.usage.output_tokens,
            s.elapsed_ms
        );
    }
    let im = &r.images;
    let _ = writeln!(
        out,
        "\n## Screenshots\n\n{} of {} observation slots referenced; {} sent, {} missing{}\n",
        im.referenced,
        im.frames,
        im.sent,
        im.missing,
        if im.text_only { "; evaluated text-only" } else { "" }
    );
    if !r.notes.is_empty() {
        let _ = writeln!(out, "## Notes\n");
        for n in &r.notes {
            let _ = writeln!(out, "- {}", one_line(n));
        }
        out.push('\n');
    }

    let p = &r.provenance;
    let _ = writeln!(out, "---\n");
    let _ = writeln!(out, "Config `{}` | backend `{}` | seed {}", p.config_fingerprint, p.backend, p.seed);
    let hashes: Vec<String> = p.prompt_hashes.iter().map(|(k, v)| format!("{k}={v}")).collect();
    let _ = writeln!(out, "\nPrompts: {}", hashes.join(", "));
    out
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Counts `(success, partial, fail)` badges in a rendering.
pub fn count_badges(rendered: &str) -> (usize, usize, usize) {
    let mut c = (0, 0, 0);
    for line in rendered.lines().filter(|l| l.starts_with("### ")) {
        if line.ends_with(verdict_badge(Verdict::Success)) {
            c.0 += 1;
        } else if line.ends_with(verdict_badge(Verdict::Partial)) {
            c.1 += 1;
        } else if line.ends_with(verdict_badge(Verdict::Fail)) {
            c.2 += 1;
        }
    }
    c
}

fn metrics_row(label: &str, n: usize, m: &MetricsSummary) -> String {
    format!(
        "| {label} | {n} | {:.2} | {:.2} | {:.2} | {:.2} |",
        m.accuracy, m.precision, m.recall, m.f1
    )
}

/// Accuracy, precision, recall and F1 in one row per evaluator.
pub fn render_metrics_table(rows: &[(String, MetricsSummary)]) -> String {
    let mut out = String::from("| evaluator | n | Acc | P | R | F1 |\n|---|---:|---:|---:|---:|---:|\n");
    for (label, m) in rows {
        out.push_str(&metrics_row(label, m.matrix.total(), m));
        out.push('\n');
    }
    out
}

/// Precision with its support (predicted positives) per evaluator.
pub fn render_precision_table(rows: &[(String, MetricsSummary)]) -> String {
    let mut out = String::from("| evaluator | predicted success | P |\n|---|---:|---:|\n");
    for (label, m) in rows {
        let _ = writeln!(out, "| {label} | {} | {:.2} |", m.matrix.tp + m.matrix.fp, m.precision);
    }
    out
}

pub fn render_group_table(t: &GroupTable) -> String {
    let mut out = String::from("| length | n | Acc | P | R | F1 |\n|---|---:|---:|---:|---:|---:|\n");
    for row in &t.rows {
        out.push_str(&metrics_row(row.group.label(), row.metrics.matrix.total(), &row.metrics));
        out.push('\n');
    }
    if let Some(all) = &t.overall {
        out.push_str(&metrics_row("overall", all.matrix.total(), all));
        out.push('\n');
    }
    if !t.omitted_groups.is_empty() {
        let names: Vec<_> = t.omitted_groups.iter().map(|g| g.label()).collect();
        let _ = writeln!(out, "\nEmpty groups omitted: {}", names.join(", "));
    }
    out
}

pub fn render_score_distribution(d: &ScoreDistribution) -> String {
    let mut out = String::from("| score | count | % |\n|---:|---:|---:|\n");
    let pct = d.rounded_percentages();
    for s in (1..=5u8).rev() {
        let _ = writeln!(out, "| {s} | {} | {:.1} |", d.count(s), pct[(s - 1) as usize]);
    }
    let _ = writeln!(out, "| usable (>=4) | {} | {:.1} |", d.usable_count, d.usable_pct);
    if d.excluded_errors > 0 {
        let _ = writeln!(out, "\n{} evaluator errors excluded", d.excluded_errors);
    }
    out
}

pub fn render_agreement(a: &Agreement) -> String {
    let mut out = format!(
        "Cohen's kappa over {} matched subtasks: {:.4} (observed {:.4}, expected {:.4})\n",
        a.matched, a.kappa.kappa, a.kappa.observed, a.kappa.expected
    );
    if a.kappa.degenerate {
        out.push_str("Warning: degenerate marginals\n");
    }
    if !a.unmatched_scores.is_empty() || !a.unmatched_labels.is_empty() {
        let _ = writeln!(
            out,
            "Unmatched: {} scored subtasks without labels, {} labels without scores",
            a.unmatched_scores.len(),
            a.unmatched_labels.len()
        );
    }
    out
}
