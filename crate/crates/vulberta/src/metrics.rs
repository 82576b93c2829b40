//! Confusion-matrix construction and evaluation metrics: accuracy,
//! precision, recall, F1, weighted F1, MCC, ROC-AUC and PR-AUC.
//!
//! All rates are reported as percentages. Degenerate denominators yield 0
//! with a `degenerate` flag instead of NaN so reports stay machine-comparable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary confusion counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryCounts {
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tp: u64,
}

impl BinaryCounts {
    pub fn total(&self) -> u64 {
        self.tn + self.fp + self.fn_ + self.tp
    }
}

/// n-by-n confusion matrix; `counts[actual][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn diagonal(&self) -> u64 {
        (0..self.n_classes).map(|c| self.counts[c][c]).sum()
    }

    /// Binary view: class 1 is the positive class.
    pub fn binary(&self) -> Option<BinaryCounts> {
        if self.n_classes != 2 {
            return None;
        }
        Some(BinaryCounts {
            tn: self.counts[0][0],
            fp: self.counts[0][1],
            fn_: self.counts[1][0],
            tp: self.counts[1][1],
        })
    }

    /// One-vs-rest counts for a single class.
    fn one_vs_rest(&self, class: usize) -> BinaryCounts {
        let tp = self.counts[class][class];
        let fn_: u64 = (0..self.n_classes)
            .filter(|&c| c != class)
            .map(|c| self.counts[class][c])
            .sum();
        let fp: u64 = (0..self.n_classes)
            .filter(|&c| c != class)
            .map(|c| self.counts[c][class])
            .sum();
        let tn = self.total() - tp - fn_ - fp;
        BinaryCounts { tn, fp, fn_, tp }
    }

    pub fn support(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }
}

/// Exact confusion counting.
pub fn confusion(labels: &[usize], predictions: &[usize], n_classes: usize) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(Error::Input(format!(
            "labels ({}) and predictions ({}) differ in length",
            labels.len(),
            predictions.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Input("empty evaluation stream".into()));
    }
    let mut counts = vec![vec![0u64; n_classes]; n_classes];
    for (&l, &p) in labels.iter().zip(predictions) {
        if l >= n_classes || p >= n_classes {
            return Err(Error::Input(format!(
                "label/prediction ({l}/{p}) outside class range 0..{n_classes}"
            )));
        }
        counts[l][p] += 1;
    }
    Ok(ConfusionMatrix { n_classes, counts })
}

/// Binary metrics as percentages.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mcc: f64,
    pub degenerate: bool,
}

fn ratio(num: f64, den: f64, degenerate: &mut bool) -> f64 {
    if den == 0.0 {
        *degenerate = true;
        0.0
    } else {
        num / den
    }
}

/// Precision, recall, F1, accuracy and MCC from binary counts.
pub fn binary_metrics(cm: &BinaryCounts) -> BinaryMetrics {
    let (tn, fp, fn_, tp) = (cm.tn as f64, cm.fp as f64, cm.fn_ as f64, cm.tp as f64);
    let mut degenerate = false;
    let precision = ratio(tp, tp + fp, &mut degenerate);
    let recall = ratio(tp, tp + fn_, &mut degenerate);
    let f1 = ratio(2.0 * precision * recall, precision + recall, &mut degenerate);
    let accuracy = ratio(tp + tn, tp + tn + fp + fn_, &mut degenerate);
    let mcc_den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    let mcc = ratio(tp * tn - fp * fn_, mcc_den, &mut degenerate);
    BinaryMetrics {
        accuracy: accuracy * 100.0,
        precision: precision * 100.0,
        recall: recall * 100.0,
        f1: f1 * 100.0,
        mcc: mcc * 100.0,
        degenerate,
    }
}

/// Per-class one-vs-rest precision/recall/F1 with support.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PerClassMetrics {
    pub class: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

pub fn per_class_metrics(cm: &ConfusionMatrix) -> Vec<PerClassMetrics> {
    (0..cm.n_classes)
        .map(|c| {
            let b = binary_metrics(&cm.one_vs_rest(c));
            PerClassMetrics {
                class: c,
                precision: b.precision,
                recall: b.recall,
                f1: b.f1,
                support: cm.support(c),
            }
        })
        .collect()
}

/// Support-weighted mean of per-class one-vs-rest F1, as a percentage.
/// Classes with zero support contribute 0 with zero weight.
pub fn weighted_f1(cm: &ConfusionMatrix) -> f64 {
    let per_class = per_class_metrics(cm);
    let total: u64 = per_class.iter().map(|m| m.support).sum();
    if total == 0 {
        return 0.0;
    }
    per_class
        .iter()
        .map(|m| m.f1 * m.support as f64)
        .sum::<f64>()
        / total as f64
}

fn check_scores(labels: &[usize], scores: &[f64]) -> Result<(u64, u64)> {
    if labels.len() != scores.len() {
        return Err(Error::Input("labels and scores differ in length".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Input(
            "both classes must be present for AUC computation".into(),
        ));
    }
    Ok((pos, neg))
}

/// ROC-AUC via the rank statistic: the probability that a random positive
/// outscores a random negative, ties counted one half. Percentage.
pub fn roc_auc(labels: &[usize], scores: &[f64]) -> Result<f64> {
    let (pos, neg) = check_scores(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("scores must not be NaN"));
    // average ranks over tie groups (1-based ranks)
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64) * 100.0)
}

/// PR-AUC as average precision: the step-wise integral of precision over
/// recall across distinct score thresholds. Percentage.
pub fn pr_auc(labels: &[usize], scores: &[f64]) -> Result<f64> {
    let (pos, _neg) = check_scores(labels, scores)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("scores must not be NaN"));
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(ap * 100.0)
}

/// Full evaluation report; all rates are percentages rounded to 2 decimals.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub weighted_f1: f64,
    pub mcc: f64,
    pub roc_auc: Option<f64>,
    pub pr_auc: Option<f64>,
    pub per_class: Vec<PerClassMetrics>,
    pub degenerate: bool,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Build a report from labels, argmax predictions and (for binary tasks)
/// positive-class scores.
pub fn eval_report(
    labels: &[usize],
    predictions: &[usize],
    scores: Option<&[f64]>,
    n_classes: usize,
) -> Result<EvalReport> {
    let cm = confusion(labels, predictions, n_classes)?;
    let wf1 = weighted_f1(&cm);
    let mut per_class = per_class_metrics(&cm);
    for m in &mut per_class {
        m.precision = round2(m.precision);
        m.recall = round2(m.recall);
        m.f1 = round2(m.f1);
    }
    let (binary, degenerate) = match cm.binary() {
        Some(b) => {
            let m = binary_metrics(&b);
            (m, m.degenerate)
        }
        None => {
            // multi-class: accuracy from the diagonal, binary-only slots 0
            let acc = cm.diagonal() as f64 / cm.total() as f64 * 100.0;
            (
                BinaryMetrics {
                    accuracy: acc,
                    precision: 0.0,
                    recall: 0.0,
                    f1: 0.0,
                    mcc: 0.0,
                    degenerate: false,
                },
                false,
            )
        }
    };
    let (roc, pr) = match (scores, n_classes) {
        (Some(s), 2) => (Some(round2(roc_auc(labels, s)?)), Some(round2(pr_auc(labels, s)?))),
        _ => (None, None),
    };
    Ok(EvalReport {
        confusion: cm,
        accuracy: round2(binary.accuracy),
        precision: round2(binary.precision),
        recall: round2(binary.recall),
        f1: round2(binary.f1),
        weighted_f1: round2(wf1),
        mcc: round2(binary.mcc),
        roc_auc: roc,
        pr_auc: pr,
        per_class,
        degenerate,
    })
}

/// One CSV summary row for spreadsheet aggregation.
pub fn report_csv_row(report: &EvalReport) -> String {
    let b = report.confusion.binary();
    format!(
        "{},{},{},{},{:.2},{:.2},{:.2},{:.2},{:.2},{:.2},{},{}\n",
        b.map_or(0, |b| b.tn),
        b.map_or(0, |b| b.fp),
        b.map_or(0, |b| b.fn_),
        b.map_or(0, |b| b.tp),
        report.accuracy,
        report.precision,
        report.recall,
        report.f1,
        report.weighted_f1,
        report.mcc,
        report.roc_auc.map_or(String::from("-"), |v| format!("{v:.2}")),
        report.pr_auc.map_or(String::from("-"), |v| format!("{v:.2}")),
    )
}
