//! Confusion matrices and F1 summaries for three-way stance predictions.
//!
//! Precision, recall and F1 with a zero denominator are 0.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::domain::StanceLabel;
use crate::error::MetricsError;

/// Counts indexed `[gold][predicted]` in [`StanceLabel::index`] order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 3]; 3],
    pub n: u64,
}

impl ConfusionMatrix {
    pub fn add(&mut self, gold: StanceLabel, pred: StanceLabel) {
        self.counts[gold.index()][pred.index()] += 1;
        self.n += 1;
    }

    pub fn get(&self, gold: StanceLabel, pred: StanceLabel) -> u64 {
        self.counts[gold.index()][pred.index()]
    }

    fn tp_fp_fn(&self, label: StanceLabel) -> (u64, u64, u64) {
        let i = label.index();
        let tp = self.counts[i][i];
        let predicted: u64 = (0..3).map(|g| self.counts[g][i]).sum();
        let actual: u64 = self.counts[i].iter().sum();
        (tp, predicted - tp, actual - tp)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: BTreeMap<StanceLabel, ClassScores>,
    pub micro_f1: f64,
    pub macro_f1: f64,
    /// Mean of micro and macro F1.
    pub f1_m: f64,
    /// Mean of the favor and against F1 scores.
    pub f1_avg_fa: f64,
    pub n: u64,
}

impl MetricsReport {
    pub fn f1(&self, label: StanceLabel) -> f64 {
        self.per_class[&label].f1
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1_from(tp: u64, fp: u64, fn_: u64) -> (f64, f64, f64) {
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

pub fn confusion(golds: &[StanceLabel], preds: &[StanceLabel]) -> Result<ConfusionMatrix, MetricsError> {
    if golds.len() != preds.len() {
        return Err(MetricsError::LengthMismatch { golds: golds.len(), preds: preds.len() });
    }
    if golds.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut m = ConfusionMatrix::default();
    for (&g, &p) in golds.iter().zip(preds) {
        m.add(g, p);
    }
    Ok(m)
}

pub fn score(matrix: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    if matrix.n == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let mut per_class = BTreeMap::new();
    let (mut tp_sum, mut fp_sum, mut fn_sum) = (0, 0, 0);
    for label in StanceLabel::ALL {
        let (tp, fp, fn_) = matrix.tp_fp_fn(label);
        tp_sum += tp;
        fp_sum += fp;
        fn_sum += fn_;
        let (precision, recall, f1) = f1_from(tp, fp, fn_);
        per_class.insert(label, ClassScores { precision, recall, f1 });
    }
    let micro_f1 = f1_from(tp_sum, fp_sum, fn_sum).2;
    let macro_f1 = per_class.values().map(|c| c.f1).sum::<f64>() / 3.0;
    let f1_avg_fa = (per_class[&StanceLabel::Favor].f1 + per_class[&StanceLabel::Against].f1) / 2.0;
    Ok(MetricsReport { per_class, micro_f1, macro_f1, f1_m: (micro_f1 + macro_f1) / 2.0, f1_avg_fa, n: matrix.n })
}

pub fn evaluate(golds: &[StanceLabel], preds: &[StanceLabel]) -> Result<MetricsReport, MetricsError> {
    score(&confusion(golds, preds)?)
}

/// Markdown table with one column per setting (sorted by name) and values
/// in percent to one decimal.
pub fn report_markdown(reports: &BTreeMap<String, MetricsReport>) -> Result<String, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::NoReports);
    }
    fn pct(v: f64) -> String {
        format!("{:.1}", v * 100.0)
    }
    let mut out = String::new();
    let names: Vec<&String> = reports.keys().collect();
    let _ = writeln!(out, "| Metric | {} |", names.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" | "));
    let _ = writeln!(out, "|---|{}", "---:|".repeat(names.len()));
    type Row = (&'static str, fn(&MetricsReport) -> String);
    let rows: [Row; 5] = [
        ("F1 micro", |r| pct(r.micro_f1)),
        ("F1 macro", |r| pct(r.macro_f1)),
        ("F1_m", |r| pct(r.f1_m)),
        ("F1 avg (favor, against)", |r| pct(r.f1_avg_fa)),
        ("n", |r| r.n.to_string()),
    ];
    for (label, cell) in rows {
        let cells: Vec<String> = reports.values().map(cell).collect();
        let _ = writeln!(out, "| {label} | {} |", cells.join(" | "));
    }
    Ok(out)
}
