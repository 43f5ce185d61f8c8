//! Evaluation harness: benchmark manifests, classification metrics, judge
//! scoring, latency overhead, and robustness perturbations.

pub mod judge;
pub mod metrics;
pub mod overhead;
pub mod perturb;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{keyword_fallback, parse_moderation_output};
use crate::gateway::{Gateway, GatewayError, ImageRef};
use crate::policy::Policy;
use crate::prompt::{build_classification_prompt, build_comprehension_prompt, Mode};

pub use judge::{judge_explanations, JudgeOutcome};
pub use metrics::{
    auprc_stepwise, binary_collapse, multiclass_accuracy, per_class_metrics, BinaryMetrics,
    ClassMetrics, ScoredPrediction,
};
pub use overhead::{measure_overhead, OverheadReport};
pub use perturb::{perturb, perturb_file, PerturbKind};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    EmptyInput,
    #[error("judge backend unavailable")]
    JudgeUnavailable,
    #[error("cannot decode image {path:?}")]
    UndecodableImage {
        path: PathBuf,
        #[source]
        source: Box<image::ImageError>,
    },
    #[error("manifest line {line} is malformed: {detail}")]
    MalformedManifest { line: usize, detail: String },
    #[error("benchmark label {0:?} has no policy mapping")]
    UnmappedLabel(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Whether a benchmark carries per-category labels or a two-class split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ManifestKind {
    MultiClass,
    Binary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchSample {
    pub sample_id: String,
    pub image_ref: ImageRef,
    pub labels: Vec<String>,
}

/// A benchmark: samples plus the alignment from benchmark categories to
/// policy categories. Serialized as JSONL with a leading header line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkManifest {
    pub name: String,
    pub kind: ManifestKind,
    pub category_map: BTreeMap<String, String>,
    pub samples: Vec<BenchSample>,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    name: String,
    kind: ManifestKind,
    category_map: BTreeMap<String, String>,
}

impl BenchmarkManifest {
    /// Maps a benchmark label to its policy category.
    pub fn policy_label(&self, label: &str) -> Result<&str, EvalError> {
        self.category_map
            .get(label)
            .map(String::as_str)
            .ok_or_else(|| EvalError::UnmappedLabel(label.to_string()))
    }

    pub fn to_jsonl(&self) -> String {
        let header = ManifestHeader {
            name: self.name.clone(),
            kind: self.kind,
            category_map: self.category_map.clone(),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        for sample in &self.samples {
            out.push('\n');
            out.push_str(&serde_json::to_string(sample).expect("sample serializes"));
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, EvalError> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (line_no, header_line) = lines.next().ok_or(EvalError::EmptyInput)?;
        let header: ManifestHeader = serde_json::from_str(header_line).map_err(|e| {
            EvalError::MalformedManifest { line: line_no + 1, detail: e.to_string() }
        })?;
        let mut samples = Vec::new();
        for (line_no, line) in lines {
            let sample: BenchSample = serde_json::from_str(line).map_err(|e| {
                EvalError::MalformedManifest { line: line_no + 1, detail: e.to_string() }
            })?;
            samples.push(sample);
        }
        for (i, sample) in samples.iter().enumerate() {
            for label in &sample.labels {
                if !header.category_map.contains_key(label) {
                    return Err(EvalError::MalformedManifest {
                        line: i + 2,
                        detail: format!("label {label:?} missing from category_map"),
                    });
                }
            }
        }
        Ok(Self {
            name: header.name,
            kind: header.kind,
            category_map: header.category_map,
            samples,
        })
    }
}

/// Full benchmark report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub benchmark: String,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub multiclass_acc: f64,
    pub binary: Option<BinaryMetrics>,
    pub mean_overhead_seconds: Option<f64>,
    pub overhead_std_seconds: Option<f64>,
    pub judge_mean: Option<f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned-column text rendering, one row per category.
    pub fn to_text_table(&self) -> String {
        let mut out = format!("Benchmark: {}\n", self.benchmark);
        out.push_str(&format!(
            "{:<28} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "Category", "AUPRC", "F1", "TPR", "FPR", "Support"
        ));
        for (name, m) in &self.per_class {
            out.push_str(&format!(
                "{:<28} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>8}\n",
                name, m.auprc, m.f1, m.tpr, m.fpr, m.support
            ));
        }
        out.push_str(&format!("Multi-class accuracy: {:.4}\n", self.multiclass_acc));
        if let Some(b) = &self.binary {
            out.push_str(&format!(
                "Binary accuracy: {:.4}  FPR: {:.4}  F1: {:.4}\n",
                b.accuracy, b.fpr, b.f1
            ));
        }
        if let (Some(mean), Some(std)) = (self.mean_overhead_seconds, self.overhead_std_seconds) {
            out.push_str(&format!("Overhead per image: {mean:.4} s (std {std:.4})\n"));
        }
        if let Some(j) = self.judge_mean {
            out.push_str(&format!("Judge mean score: {j:.2}\n"));
        }
        out
    }
}

/// Moderates one image and scores it against its ground truth. Structured
/// parse first; keyword fallback only when that fails. Backend errors count
/// the sample as misclassified (empty prediction against a non-empty truth).
pub fn score_sample(
    gateway: &Gateway,
    backend: &str,
    policy: &Policy,
    mode: Mode,
    sample_id: &str,
    image: &ImageRef,
    true_labels: &BTreeSet<String>,
) -> ScoredPrediction {
    let prompt = match mode {
        Mode::Comprehension => build_comprehension_prompt(policy),
        _ => build_classification_prompt(),
    };
    let start = std::time::Instant::now();
    let (predicted, explanation) = match gateway.infer(backend, &prompt, image) {
        Ok(response) => {
            let report = parse_moderation_output(&response.text, policy, mode);
            let result = match report.result {
                Some(r) if report.ok => r,
                _ => keyword_fallback(&response.text, policy),
            };
            (result.labels(policy), result.reason)
        }
        Err(_) => (BTreeSet::new(), None),
    };
    let latency = start.elapsed().as_secs_f64();
    let mut scored = ScoredPrediction::hard(
        sample_id.to_string(),
        true_labels.iter().cloned(),
        predicted.into_iter(),
    );
    scored.explanation = explanation;
    scored.latency_seconds = Some(latency);
    scored
}

/// Runs a benchmark manifest through one backend and assembles the report.
pub fn run_benchmark(
    manifest: &BenchmarkManifest,
    gateway: &Gateway,
    backend: &str,
    policy: &Policy,
    mode: Mode,
) -> Result<EvalReport, EvalError> {
    if manifest.samples.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut predictions = Vec::with_capacity(manifest.samples.len());
    for sample in &manifest.samples {
        let mut truth = BTreeSet::new();
        for label in &sample.labels {
            truth.insert(manifest.policy_label(label)?.to_string());
        }
        predictions.push(score_sample(
            gateway,
            backend,
            policy,
            mode,
            &sample.sample_id,
            &sample.image_ref,
            &truth,
        ));
    }
    let mut per_class = BTreeMap::new();
    for cat in &policy.categories {
        let appears = predictions.iter().any(|p| {
            p.true_labels.contains(&cat.id) || p.predicted_labels.contains(&cat.id)
        });
        if appears {
            per_class.insert(cat.id.clone(), per_class_metrics(&predictions, &cat.id)?);
        }
    }
    let binary = policy
        .safe_class()
        .map(|safe| binary_collapse(&predictions, &safe.id))
        .transpose()?;
    let latencies: Vec<f64> = predictions.iter().filter_map(|p| p.latency_seconds).collect();
    let mean_overhead = if latencies.is_empty() {
        None
    } else {
        Some(latencies.iter().sum::<f64>() / latencies.len() as f64)
    };
    Ok(EvalReport {
        benchmark: manifest.name.clone(),
        per_class,
        multiclass_acc: multiclass_accuracy(&predictions)?,
        binary,
        mean_overhead_seconds: mean_overhead,
        overhead_std_seconds: mean_overhead.map(|m| {
            (latencies.iter().map(|t| (t - m).powi(2)).sum::<f64>() / latencies.len() as f64).sqrt()
        }),
        judge_mean: None,
    })
}
