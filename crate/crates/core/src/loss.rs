//! Reference numerics for the post-training objective: per-token
//! cross-entropy from logits, the critical-token weight mask, the weighted
//! loss, and finite-difference gradient verification. Desk scale,
//! double precision throughout.

use std::collections::HashSet;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::SpecialTokenVocab;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("logits shape {logits:?} inconsistent with targets shape {targets:?}")]
    ShapeMismatch { logits: Vec<usize>, targets: Vec<usize> },
    #[error("target {target} out of range for vocabulary size {vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },
    #[error("weight mask sums to zero")]
    ZeroMask,
}

/// Critical-token weighting: targets in the critical set get `w_critical`,
/// everything else `w_normal`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TokenWeightConfig {
    pub critical_token_ids: HashSet<usize>,
    pub w_critical: f64,
    pub w_normal: f64,
}

impl TokenWeightConfig {
    pub fn new(critical_token_ids: HashSet<usize>, w_critical: f64, w_normal: f64) -> Self {
        debug_assert!(w_critical >= w_normal && w_normal > 0.0);
        Self { critical_token_ids, w_critical, w_normal }
    }

    /// Default 5:1 ratio over the verdict-carrying tokens of a vocabulary
    /// (category tokens plus structural key tokens).
    pub fn from_vocab(vocab: &SpecialTokenVocab) -> Self {
        let critical = vocab.all_ids().into_iter().map(|id| id as usize).collect();
        Self::new(critical, 5.0, 1.0)
    }

    /// Uniform weighting; the weighted loss reduces to the plain mean.
    pub fn uniform() -> Self {
        Self::new(HashSet::new(), 1.0, 1.0)
    }
}

fn check_shapes(logits: &Array3<f64>, targets: &Array2<usize>) -> Result<(), LossError> {
    let (n, t, v) = logits.dim();
    if targets.dim() != (n, t) {
        return Err(LossError::ShapeMismatch {
            logits: vec![n, t, v],
            targets: targets.shape().to_vec(),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&y| y >= v) {
        return Err(LossError::TargetOutOfRange { target: bad, vocab: v });
    }
    Ok(())
}

/// Per-token negative log-likelihood: `L[i,t] = -log softmax(logits[i,t,:])[y[i,t]]`,
/// computed with max-subtraction log-sum-exp. Finite for all finite logits.
pub fn per_token_loss(logits: &Array3<f64>, targets: &Array2<usize>) -> Result<Array2<f64>, LossError> {
    check_shapes(logits, targets)?;
    let (n, t, _) = logits.dim();
    let mut losses = Array2::zeros((n, t));
    for i in 0..n {
        for j in 0..t {
            let row = logits.slice(ndarray::s![i, j, ..]);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let log_sum_exp = max + row.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
            losses[[i, j]] = log_sum_exp - row[targets[[i, j]]];
        }
    }
    Ok(losses)
}

/// Token weight mask `M[i,t]`: `w_critical` for critical targets, `w_normal`
/// otherwise.
pub fn weight_mask(targets: &Array2<usize>, cfg: &TokenWeightConfig) -> Array2<f64> {
    targets.mapv(|y| {
        if cfg.critical_token_ids.contains(&y) {
            cfg.w_critical
        } else {
            cfg.w_normal
        }
    })
}

/// Mask-weighted mean: `sum(M * L) / sum(M)`.
pub fn weighted_loss(losses: &Array2<f64>, mask: &Array2<f64>) -> Result<f64, LossError> {
    let mask_sum: f64 = mask.sum();
    if mask_sum <= 0.0 {
        return Err(LossError::ZeroMask);
    }
    let weighted: f64 = losses.iter().zip(mask.iter()).map(|(l, m)| l * m).sum();
    Ok(weighted / mask_sum)
}

/// Analytic gradient of the weighted loss with respect to the logits:
/// softmax minus one-hot, scaled by `M[i,t] / sum(M)`.
pub fn analytic_gradient(
    logits: &Array3<f64>,
    targets: &Array2<usize>,
    cfg: &TokenWeightConfig,
) -> Result<Array3<f64>, LossError> {
    check_shapes(logits, targets)?;
    let mask = weight_mask(targets, cfg);
    let mask_sum = mask.sum();
    if mask_sum <= 0.0 {
        return Err(LossError::ZeroMask);
    }
    let (n, t, v) = logits.dim();
    let mut grad = Array3::zeros((n, t, v));
    for i in 0..n {
        for j in 0..t {
            let row = logits.slice(ndarray::s![i, j, ..]);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|&l| (l - max).exp()).sum();
            let scale = mask[[i, j]] / mask_sum;
            for k in 0..v {
                let softmax = (row[k] - max).exp() / denom;
                let one_hot = if targets[[i, j]] == k { 1.0 } else { 0.0 };
                grad[[i, j, k]] = scale * (softmax - one_hot);
            }
        }
    }
    Ok(grad)
}

/// Compares the analytic gradient against central finite differences at every
/// coordinate and returns the maximum relative error (denominator floored at
/// 1e-3 so near-zero coordinates compare on an absolute scale).
pub fn grad_check(
    logits: &Array3<f64>,
    targets: &Array2<usize>,
    cfg: &TokenWeightConfig,
    eps: f64,
) -> Result<f64, LossError> {
    assert!(eps > 0.0);
    let analytic = analytic_gradient(logits, targets, cfg)?;
    let mask = weight_mask(targets, cfg);
    let (n, t, v) = logits.dim();
    let mut max_err: f64 = 0.0;
    let mut perturbed = logits.clone();
    for i in 0..n {
        for j in 0..t {
            for k in 0..v {
                let original = perturbed[[i, j, k]];
                perturbed[[i, j, k]] = original + eps;
                let plus = weighted_loss(&per_token_loss(&perturbed, targets)?, &mask)?;
                perturbed[[i, j, k]] = original - eps;
                let minus = weighted_loss(&per_token_loss(&perturbed, targets)?, &mask)?;
                perturbed[[i, j, k]] = original;
                let numeric = (plus - minus) / (2.0 * eps);
                let a = analytic[[i, j, k]];
                let denom = a.abs().max(numeric.abs()).max(1e-3);
                max_err = max_err.max((a - numeric).abs() / denom);
            }
        }
    }
    Ok(max_err)
}

/// Small JSON tensor fixture for the CLI check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossFixture {
    pub logits: Vec<Vec<Vec<f64>>>,
    pub targets: Vec<Vec<usize>>,
    pub critical_token_ids: Vec<usize>,
    pub w_critical: f64,
    pub w_normal: f64,
}

/// Loss and gradient-check results over a fixture.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureReport {
    pub weighted_loss: f64,
    pub grad_check_max_rel_error: f64,
}

impl LossFixture {
    pub fn run(&self, eps: f64) -> Result<FixtureReport, LossError> {
        let n = self.logits.len();
        let t = self.logits.first().map(|x| x.len()).unwrap_or(0);
        let v = self.logits.first().and_then(|x| x.first()).map(|x| x.len()).unwrap_or(0);
        let mut logits = Array3::zeros((n, t, v));
        let mut targets = Array2::zeros((n, t));
        for i in 0..n {
            for j in 0..t {
                targets[[i, j]] = self.targets[i][j];
                for k in 0..v {
                    logits[[i, j, k]] = self.logits[i][j][k];
                }
            }
        }
        let cfg = TokenWeightConfig::new(
            self.critical_token_ids.iter().copied().collect(),
            self.w_critical,
            self.w_normal,
        );
        let losses = per_token_loss(&logits, &targets)?;
        let mask = weight_mask(&targets, &cfg);
        Ok(FixtureReport {
            weighted_loss: weighted_loss(&losses, &mask)?,
            grad_check_max_rel_error: grad_check(&logits, &targets, &cfg, eps)?,
        })
    }
}
