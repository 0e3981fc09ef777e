use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::graph::{BatchLabels, Task};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricName {
    Mae,
    Accuracy,
    F1Macro,
    AveragePrecision,
    Auroc,
}

impl MetricName {
    pub fn name(self) -> &'static str {
        match self {
            MetricName::Mae => "mae",
            MetricName::Accuracy => "accuracy",
            MetricName::F1Macro => "f1_macro",
            MetricName::AveragePrecision => "average_precision",
            MetricName::Auroc => "auroc",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "mae" => MetricName::Mae,
            "accuracy" => MetricName::Accuracy,
            "f1_macro" => MetricName::F1Macro,
            "average_precision" | "ap" => MetricName::AveragePrecision,
            "auroc" => MetricName::Auroc,
            other => bail!(Config, "unknown metric {other:?}"),
        })
    }

    /// Whether larger values are better.
    pub fn higher_is_better(self) -> bool {
        self != MetricName::Mae
    }

    /// Conventional metric for a task.
    pub fn default_for(task: Task) -> Self {
        match task {
            Task::GraphRegression => MetricName::Mae,
            Task::GraphClassification | Task::NodeClassification => MetricName::Accuracy,
            Task::GraphMultilabel => MetricName::AveragePrecision,
        }
    }
}

/// Named evaluation results plus the task loss.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub loss: f64,
    pub values: BTreeMap<String, f64>,
}

impl Metrics {
    pub fn get(&self, m: MetricName) -> Result<f64> {
        match self.values.get(m.name()) {
            Some(&v) => Ok(v),
            None => bail!(UndefinedMetric, "{} is not available for this data", m.name()),
        }
    }
}

pub fn mae(pred: &[f64], target: &[f64]) -> f64 {
    let n = pred.len().max(1) as f64;
    pred.iter().zip(target).map(|(p, y)| (p - y).abs()).sum::<f64>() / n
}

/// Index of the first maximal entry of each row.
pub fn argmax_rows(logits: &Tensor<f64>) -> Vec<usize> {
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for (j, &x) in row.iter().enumerate() {
                if x > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len().max(1) as f64
}

/// Unweighted mean over all `num_classes` of `2TP / (2TP + FP + FN)`, with
/// classes that never occur scoring 0.
pub fn f1_macro(pred: &[usize], truth: &[usize], num_classes: usize) -> f64 {
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fneg = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let total: f64 = (0..num_classes)
        .map(|c| {
            let den = 2 * tp[c] + fp[c] + fneg[c];
            if den == 0 {
                0.0
            } else {
                (2 * tp[c]) as f64 / den as f64
            }
        })
        .sum();
    total / num_classes.max(1) as f64
}

/// Non-interpolated average precision. Equal scores form one threshold:
/// each distinct threshold adds `(new positives / positives) · precision`.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let npos = labels.iter().filter(|&&b| b).count();
    if npos == 0 {
        bail!(UndefinedMetric, "average precision needs at least one positive");
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut new_pos = 0;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            new_pos += labels[order[j]] as usize;
            j += 1;
        }
        tp += new_pos;
        seen += j - i;
        if new_pos > 0 {
            ap += (new_pos as f64 / npos as f64) * (tp as f64 / seen as f64);
        }
        i = j;
    }
    Ok(ap)
}

/// Area under the ROC curve via the Mann–Whitney statistic with midranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let npos = labels.iter().filter(|&&b| b).count();
    let nneg = labels.len() - npos;
    if npos == 0 || nneg == 0 {
        bail!(UndefinedMetric, "AUROC needs both classes present");
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share their mean.
        let mid = (i + 1 + j) as f64 / 2.0;
        rank_sum += mid * order[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let u = rank_sum - (npos * (npos + 1)) as f64 / 2.0;
    Ok(u / (npos * nneg) as f64)
}

/// Task-appropriate metrics for model outputs (`[items × outputs]`).
/// Metrics that are undefined for the given labels are omitted.
pub fn compute_metrics(pred: &Tensor<f64>, labels: &BatchLabels, task: Task) -> Result<Metrics> {
    let mut values = BTreeMap::new();
    if pred.rows() != labels.len() {
        bail!(
            Dimension,
            "{} prediction rows for {} labels",
            pred.rows(),
            labels.len()
        );
    }
    match (task, labels) {
        (Task::GraphRegression, BatchLabels::Regression { values: y, .. }) => {
            if pred.numel() != y.len() {
                bail!(Dimension, "{} predictions for {} targets", pred.numel(), y.len());
            }
            values.insert("mae".into(), mae(pred.data(), y));
        }
        (Task::GraphClassification, BatchLabels::Classes(y))
        | (Task::NodeClassification, BatchLabels::NodeClasses(y)) => {
            let c = pred.cols();
            let p = argmax_rows(pred);
            values.insert("accuracy".into(), accuracy(&p, y));
            values.insert("f1_macro".into(), f1_macro(&p, y, c));
            if c == 2 {
                let margin: Vec<f64> = (0..pred.rows()).map(|i| pred.get2(i, 1) - pred.get2(i, 0)).collect();
                let pos: Vec<bool> = y.iter().map(|&t| t == 1).collect();
                if let Ok(a) = auroc(&margin, &pos) {
                    values.insert("auroc".into(), a);
                }
            }
        }
        (Task::GraphMultilabel, BatchLabels::MultiLabel { labels: l, values: y }) => {
            let (mut ap, mut auc) = (Vec::new(), Vec::new());
            for j in 0..*l {
                let s: Vec<f64> = (0..pred.rows()).map(|i| pred.get2(i, j)).collect();
                let t: Vec<bool> = (0..pred.rows()).map(|i| y[i * l + j] > 0.5).collect();
                if let Ok(a) = average_precision(&s, &t) {
                    ap.push(a);
                }
                if let Ok(a) = auroc(&s, &t) {
                    auc.push(a);
                }
            }
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
            if !ap.is_empty() {
                values.insert("average_precision".into(), mean(&ap));
            }
            if !auc.is_empty() {
                values.insert("auroc".into(), mean(&auc));
            }
        }
        _ => bail!(Schema, "labels do not match task {}", task.name()),
    }
    Ok(Metrics { loss: 0.0, values })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_ranking() {
        assert_eq!(auroc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
    }

    #[test]
    fn single_class_auroc_is_undefined() {
        assert!(matches!(
            auroc(&[0.3, 0.2], &[true, true]),
            Err(crate::Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn ap_hand_example() {
        let ap = average_precision(&[0.8, 0.6, 0.4], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_count_as_zero() {
        // Class 2 never appears; it still divides the mean.
        assert!((f1_macro(&[0, 1], &[0, 1], 3) - 2.0 / 3.0).abs() < 1e-15);
    }
}
