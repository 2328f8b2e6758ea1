use std::fmt;

use serde::{Deserialize, Serialize};

use crate::detector::{Decision, Verdict};
use crate::error::{Error, Result};
use crate::parser::Label;

/// Event-level confusion counts with precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl MetricReport {
    /// Empty denominators yield 0.
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        MetricReport {
            tp,
            fp,
            fn_,
            tn,
            precision,
            recall,
            f1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "events     {}", self.total())?;
        writeln!(f, "TP {}  FP {}  FN {}  TN {}", self.tp, self.fp, self.fn_, self.tn)?;
        writeln!(f, "precision  {:.4}", self.precision)?;
        writeln!(f, "recall     {:.4}", self.recall)?;
        write!(f, "f1         {:.4}", self.f1)
    }
}

/// Confusion counts over aligned decision/label pairs.
pub fn evaluate_pairs(pairs: impl IntoIterator<Item = (Decision, Label)>) -> MetricReport {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (d, l) in pairs {
        match (d, l) {
            (Decision::Anomaly, Label::Anomaly) => tp += 1,
            (Decision::Anomaly, Label::Normal) => fp += 1,
            (Decision::Normal, Label::Anomaly) => fn_ += 1,
            (Decision::Normal, Label::Normal) => tn += 1,
        }
    }
    MetricReport::from_counts(tp, fp, fn_, tn)
}

/// Scores verdicts against labels given in the same order.
pub fn evaluate(verdicts: &[Verdict], labels: &[Label]) -> Result<MetricReport> {
    if verdicts.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} verdicts but {} labels",
            verdicts.len(),
            labels.len()
        )));
    }
    Ok(evaluate_pairs(verdicts.iter().map(|v| v.decision).zip(labels.iter().copied())))
}
