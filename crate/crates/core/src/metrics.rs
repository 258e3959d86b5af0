//! Meta-evaluation: confusion-matrix metrics with task success as the
//! positive class, trajectory-length grouping, and Cohen's kappa.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pipeline::EvaluationReport;
use crate::trajectory::Dataset;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MetaEvalError {
    #[error("no prediction/gold pairs to score")]
    EmptyInput,
    #[error("label vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("report references task {0:?}, which is not in the dataset")]
    UnknownTask(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionMatrix {
    pub fn from_pairs<I: IntoIterator<Item = (bool, bool)>>(pairs: I) -> Self {
        let mut m = Self::default();
        for (predicted, gold) in pairs {
            m.record(predicted, gold);
        }
        m
    }

    pub fn record(&mut self, predicted: bool, gold: bool) {
        match (predicted, gold) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Accuracy/precision/recall/F1 as percentages in `[0, 100]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub matrix: ConfusionMatrix,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Harmonic mean of two percentages; zero when both are zero.
pub fn f1_from_precision_recall(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

fn pct(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        100.0 * num as f64 / den as f64
    }
}

impl MetricsSummary {
    pub fn from_matrix(matrix: ConfusionMatrix) -> Result<Self, MetaEvalError> {
        let total = matrix.total();
        if total == 0 {
            return Err(MetaEvalError::EmptyInput);
        }
        if matrix.tp + matrix.fp == 0 {
            tracing::warn!("no positive predictions; precision defined as 0");
        }
        if matrix.tp + matrix.fn_ == 0 {
            tracing::warn!("no positive gold labels; recall defined as 0");
        }
        let precision = pct(matrix.tp, matrix.tp + matrix.fp);
        let recall = pct(matrix.tp, matrix.tp + matrix.fn_);
        Ok(Self {
            matrix,
            accuracy: pct(matrix.tp + matrix.tn, total),
            precision,
            recall,
            f1: f1_from_precision_recall(precision, recall),
        })
    }
}

/// Scores `(predicted, gold)` pairs.
pub fn compute_metrics(pairs: &[(bool, bool)]) -> Result<MetricsSummary, MetaEvalError> {
    MetricsSummary::from_matrix(ConfusionMatrix::from_pairs(pairs.iter().copied()))
}

// ---------------------------------------------------------------------------
// Length groups
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthGroup {
    Lt10,
    #[serde(rename = "g10_20")]
    G10To20,
    #[serde(rename = "g20_30")]
    G20To30,
    #[serde(rename = "g30_40")]
    G30To40,
    #[serde(rename = "g40_50")]
    G40To50,
    #[serde(rename = "g50_80")]
    G50To80,
    Overflow,
}

impl LengthGroup {
    pub const ALL: [LengthGroup; 7] = [
        LengthGroup::Lt10,
        LengthGroup::G10To20,
        LengthGroup::G20To30,
        LengthGroup::G30To40,
        LengthGroup::G40To50,
        LengthGroup::G50To80,
        LengthGroup::Overflow,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            LengthGroup::Lt10 => "<10",
            LengthGroup::G10To20 => "10-20",
            LengthGroup::G20To30 => "20-30",
            LengthGroup::G30To40 => "30-40",
            LengthGroup::G40To50 => "40-50",
            LengthGroup::G50To80 => "50-80",
            LengthGroup::Overflow => ">80",
        }
    }
}

impl fmt::Display for LengthGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Bins are left-closed, right-open, except the last which includes 80.
/// Lengths above 80 fall into `Overflow`. A length of 0 is treated as `Lt10`.
pub fn group_of_length(n: usize) -> LengthGroup {
    match n {
        0..=9 => LengthGroup::Lt10,
        10..=19 => LengthGroup::G10To20,
        20..=29 => LengthGroup::G20To30,
        30..=39 => LengthGroup::G30To40,
        40..=49 => LengthGroup::G40To50,
        50..=80 => LengthGroup::G50To80,
        _ => LengthGroup::Overflow,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: LengthGroup,
    pub metrics: MetricsSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTable {
    /// Non-empty groups only, in group order.
    pub rows: Vec<GroupRow>,
    pub overall: Option<MetricsSummary>,
    pub omitted_groups: Vec<LengthGroup>,
    pub excluded_missing_gold: usize,
    pub excluded_evaluator_errors: usize,
}

/// Joins reports with their dataset items and scores each length group.
pub fn metrics_by_group(
    reports: &[EvaluationReport],
    dataset: &Dataset,
    exclude_errors: bool,
) -> Result<GroupTable, MetaEvalError> {
    let index: HashMap<&str, usize> = dataset
        .items
        .iter()
        .map(|t| (t.task_id.as_str(), t.trajectory.len()))
        .collect();
    let mut per_group: HashMap<LengthGroup, ConfusionMatrix> = HashMap::new();
    let mut overall = ConfusionMatrix::default();
    let mut missing_gold = 0;
    let mut errors = 0;

    for report in reports {
        let item = dataset
            .get(&report.task_id)
            .ok_or_else(|| MetaEvalError::UnknownTask(report.task_id.clone()))?;
        let Some(gold) = item.gold_label else {
            missing_gold += 1;
            continue;
        };
        if exclude_errors && report.evaluator_error {
            errors += 1;
            continue;
        }
        let group = group_of_length(index[report.task_id.as_str()]);
        let predicted = report.final_verdict.success;
        per_group.entry(group).or_default().record(predicted, gold);
        overall.record(predicted, gold);
    }
    if missing_gold > 0 {
        tracing::warn!(count = missing_gold, "reports without gold labels were excluded");
    }

    let mut rows = Vec::new();
    let mut omitted = Vec::new();
    for group in LengthGroup::ALL {
        match per_group.get(&group) {
            Some(m) if m.total() > 0 => rows.push(GroupRow {
                group,
                metrics: MetricsSummary::from_matrix(*m)?,
            }),
            _ => omitted.push(group),
        }
    }
    Ok(GroupTable {
        rows,
        overall: MetricsSummary::from_matrix(overall).ok(),
        omitted_groups: omitted,
        excluded_missing_gold: missing_gold,
        excluded_evaluator_errors: errors,
    })
}

// ---------------------------------------------------------------------------
// Agreement
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaDetail {
    pub kappa: f64,
    pub observed: f64,
    pub expected: f64,
    /// Chance agreement was 1, so kappa is undefined and was set by rule.
    pub degenerate: bool,
}

/// Cohen's kappa with observed and chance agreement components.
pub fn cohen_kappa_detail<T: Eq + Hash>(a: &[T], b: &[T]) -> Result<KappaDetail, MetaEvalError> {
    if a.len() != b.len() {
        return Err(MetaEvalError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetaEvalError::EmptyInput);
    }
    let n = a.len() as f64;
    let mut margin_a: HashMap<&T, usize> = HashMap::new();
    let mut margin_b: HashMap<&T, usize> = HashMap::new();
    let mut agree = 0usize;
    for (x, y) in a.iter().zip(b) {
        *margin_a.entry(x).or_default() += 1;
        *margin_b.entry(y).or_default() += 1;
        if x == y {
            agree += 1;
        }
    }
    let observed = agree as f64 / n;
    let expected: f64 = margin_a
        .iter()
        .map(|(label, &ca)| {
            let cb = margin_b.get(label).copied().unwrap_or(0);
            (ca as f64 / n) * (cb as f64 / n)
        })
        .sum();
    // p_e can only be 1 when both raters use one identical label throughout.
    let degenerate = margin_a.len() == 1 && margin_b.len() == 1 && margin_a.keys().eq(margin_b.keys());
    if degenerate {
        tracing::warn!("degenerate marginals: chance agreement is 1");
        let kappa = if agree == a.len() { 1.0 } else { 0.0 };
        return Ok(KappaDetail {
            kappa,
            observed,
            expected: 1.0,
            degenerate,
        });
    }
    Ok(KappaDetail {
        kappa: (observed - expected) / (1.0 - expected),
        observed,
        expected,
        degenerate,
    })
}

pub fn cohen_kappa<T: Eq + Hash>(a: &[T], b: &[T]) -> Result<f64, MetaEvalError> {
    cohen_kappa_detail(a, b).map(|d| d.kappa)
}
