//! One-vs-rest classification metrics and the binary safe/unsafe collapse.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::EvalError;

/// One scored model prediction. Confidences default to the two-level
/// convention for hard-label predictors: 1.0 for every predicted category,
/// 0.0 elsewhere.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub sample_id: String,
    pub true_labels: BTreeSet<String>,
    pub predicted_labels: BTreeSet<String>,
    /// Per-category confidence in [0, 1]; absent categories score 0.
    #[serde(default)]
    pub confidences: BTreeMap<String, f64>,
    #[serde(default)]
    pub explanation: Option<String>,
    #[serde(default)]
    pub latency_seconds: Option<f64>,
}

impl ScoredPrediction {
    /// Hard-label prediction under the two-level confidence convention.
    pub fn hard(
        sample_id: impl Into<String>,
        true_labels: impl IntoIterator<Item = String>,
        predicted_labels: impl IntoIterator<Item = String>,
    ) -> Self {
        let predicted_labels: BTreeSet<String> = predicted_labels.into_iter().collect();
        let confidences = predicted_labels.iter().map(|l| (l.clone(), 1.0)).collect();
        Self {
            sample_id: sample_id.into(),
            true_labels: true_labels.into_iter().collect(),
            predicted_labels,
            confidences,
            explanation: None,
            latency_seconds: None,
        }
    }

    pub fn confidence_for(&self, category: &str) -> f64 {
        self.confidences.get(category).copied().unwrap_or(0.0)
    }
}

/// One-vs-rest metrics for a single category.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub auprc: f64,
    pub f1: f64,
    pub tpr: f64,
    pub fpr: f64,
    pub support: usize,
    pub diagnostics: Vec<String>,
}

/// Metrics after collapsing every unsafe category to one positive label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub accuracy: f64,
    pub fpr: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One-vs-rest metrics for `category`: the category is positive, everything
/// else negative. Zero-positive classes report AUPRC and F1 as 0 with a
/// diagnostic.
pub fn per_class_metrics(predictions: &[ScoredPrediction], category: &str) -> Result<ClassMetrics, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut diagnostics = Vec::new();
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for p in predictions {
        let truth = p.true_labels.contains(category);
        let predicted = p.predicted_labels.contains(category);
        match (truth, predicted) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    let support = tp + fn_;
    let auprc = if support == 0 {
        diagnostics.push(format!("category {category:?} has zero positives; AUPRC and F1 reported as 0"));
        0.0
    } else {
        let ranked: Vec<(f64, bool)> = predictions
            .iter()
            .map(|p| (p.confidence_for(category), p.true_labels.contains(category)))
            .collect();
        auprc_stepwise(&ranked)
    };
    Ok(ClassMetrics {
        auprc,
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
        tpr: ratio(tp, tp + fn_),
        fpr: ratio(fp, fp + tn),
        support,
        diagnostics,
    })
}

/// Step-wise area under the precision-recall curve over a confidence-ranked
/// list: sum of (R_k - R_{k-1}) * P_k with tied confidences grouped, no
/// interpolation. Stable sort keeps tied items in input order.
pub fn auprc_stepwise(scored: &[(f64, bool)]) -> f64 {
    let total_pos = scored.iter().filter(|(_, pos)| *pos).count();
    if total_pos == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.partial_cmp(&scored[a].0).unwrap());

    let mut area = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        // absorb the whole tied-confidence group before taking a step
        let score = scored[order[i]].0;
        let mut j = i;
        while j < order.len() && scored[order[j]].0 == score {
            if scored[order[j]].1 {
                tp += 1;
            }
            seen += 1;
            j += 1;
        }
        let precision = tp as f64 / seen as f64;
        let recall = tp as f64 / total_pos as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    area
}

/// Collapses every non-safe label to a single unsafe label and computes
/// accuracy, FPR, and F1 with unsafe as the positive class. An empty
/// predicted set is the safe verdict.
pub fn binary_collapse(predictions: &[ScoredPrediction], safe_class: &str) -> Result<BinaryMetrics, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let is_unsafe = |labels: &BTreeSet<String>| labels.iter().any(|l| l != safe_class);
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for p in predictions {
        match (is_unsafe(&p.true_labels), is_unsafe(&p.predicted_labels)) {
            (true, true) => tp += 1,
            (true, false) => fn_ += 1,
            (false, true) => fp += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(BinaryMetrics {
        accuracy: ratio(tp + tn, predictions.len()),
        fpr: ratio(fp, fp + tn),
        f1: ratio(2 * tp, 2 * tp + fp + fn_),
    })
}

/// Exact-set-match accuracy over all categories.
pub fn multiclass_accuracy(predictions: &[ScoredPrediction]) -> Result<f64, EvalError> {
    if predictions.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let hits = predictions
        .iter()
        .filter(|p| p.predicted_labels == p.true_labels)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}
