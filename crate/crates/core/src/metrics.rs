//! Confusion-matrix rates and ROC-AUC.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("scores contain only a single class")]
    SingleClass,
}

/// Binary confusion counts. Positive class = ictal.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn from_labels(predicted: &[u8], truth: &[u8]) -> Self {
        assert_eq!(predicted.len(), truth.len());
        let mut cm = Self::default();
        for (&p, &t) in predicted.iter().zip(truth) {
            match (t != 0, p != 0) {
                (true, true) => cm.tp += 1,
                (true, false) => cm.fn_ += 1,
                (false, true) => cm.fp += 1,
                (false, false) => cm.tn += 1,
            }
        }
        cm
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn add(&mut self, other: &ConfusionMatrix) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }

    /// As row-major counts, rows = true class {non-ictal, ictal},
    /// columns = predicted class. This is the layout the HMM emission
    /// estimator consumes.
    pub fn as_rows(&self) -> [[u64; 2]; 2] {
        [[self.tn, self.fp], [self.fn_, self.tp]]
    }
}

/// Rates derived from a confusion matrix. A rate whose denominator is
/// empty is reported as `None` rather than NaN.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Rates {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub fpr: Option<f64>,
}

pub fn rates(cm: &ConfusionMatrix) -> Rates {
    let div = |num: u64, den: u64| {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    Rates {
        accuracy: div(cm.tp + cm.tn, cm.total()),
        sensitivity: div(cm.tp, cm.tp + cm.fn_),
        specificity: div(cm.tn, cm.tn + cm.fp),
        fpr: div(cm.fp, cm.tn + cm.fp),
    }
}

/// Area under the ROC curve via the rank-sum (Mann-Whitney) identity:
/// `P(score_pos > score_neg) + 0.5 * P(tie)`, which equals the
/// trapezoidal area over all thresholds.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l != 0).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Average ranks over tied scores, then sum positive ranks.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0; // ranks are 1-based
        for &idx in &order[i..=j] {
            if labels[idx] != 0 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }

    let n_pos_f = n_pos as f64;
    let u = rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0;
    Ok(u / (n_pos_f * n_neg as f64))
}

/// O(n^2) pairwise-concordance oracle for [`roc_auc`]. Test-only by
/// intent, exported so the acceptance suite can call it.
pub fn roc_auc_pairwise(scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    let pos: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l != 0)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(labels)
        .filter(|(_, &l)| l == 0)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(MetricsError::SingleClass);
    }
    let mut sum = 0.0;
    for &p in &pos {
        for &n in &neg {
            sum += if p > n {
                1.0
            } else if p == n {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(sum / (pos.len() as f64 * neg.len() as f64))
}

/// Per-method evaluation block (one row of the results tables).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub fpr: Option<f64>,
    pub auc: Option<f64>,
    /// Mean detection delay in seconds over detected seizures.
    pub mean_delay_s: Option<f64>,
    pub missed_seizures: usize,
    pub n_seizures: usize,
}

impl MethodReport {
    pub fn from_confusion(cm: ConfusionMatrix, auc: Option<f64>) -> Self {
        let r = rates(&cm);
        MethodReport {
            confusion: cm,
            accuracy: r.accuracy,
            sensitivity: r.sensitivity,
            specificity: r.specificity,
            fpr: r.fpr,
            auc,
            mean_delay_s: None,
            missed_seizures: 0,
            n_seizures: 0,
        }
    }
}
