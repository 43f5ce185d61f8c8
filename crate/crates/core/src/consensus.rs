//! Multi-model vote aggregation: the unanimous four-model rule used at
//! dataset creation and the dynamically weighted rule used during
//! self-refinement.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConsensusError {
    #[error("no weight configured for backend {0:?}")]
    MissingWeight(String),
    #[error("expected exactly {expected} votes, record {sample_id:?} has {actual}")]
    WrongVoterCount { sample_id: String, expected: usize, actual: usize },
    #[error("weights sum to {0}, expected 1")]
    UnnormalizedWeights(f64),
}

/// Per-sample membership votes, one per backend.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VoteRecord {
    pub sample_id: String,
    pub votes: Vec<(String, u8)>,
    pub epoch: u32,
}

impl VoteRecord {
    pub fn new(sample_id: impl Into<String>, votes: Vec<(String, u8)>, epoch: u32) -> Self {
        debug_assert!(!votes.is_empty());
        debug_assert!(votes.iter().all(|(_, v)| *v <= 1));
        Self { sample_id: sample_id.into(), votes, epoch }
    }
}

/// The sqrt-of-epoch self-weight schedule. The self model's weight grows as
/// `w * sqrt(epoch)` up to `clamp`; peers split the remainder equally.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WeightSchedule {
    pub w: f64,
    pub clamp: f64,
    pub n_peers: usize,
}

impl WeightSchedule {
    pub fn new(w: f64, n_peers: usize) -> Self {
        Self { w, clamp: 0.9, n_peers }
    }
}

/// Self and per-peer weights at a given epoch. The peer weight is computed
/// from the clamped self weight so self + n_peers * peer = 1 exactly.
pub fn compute_weights(sched: &WeightSchedule, epoch: u32) -> (f64, f64) {
    assert!(sched.w > 0.0 && sched.clamp > 0.0 && sched.clamp < 1.0 && sched.n_peers >= 1);
    let self_weight = (sched.w * (epoch as f64).sqrt()).min(sched.clamp);
    let peer_weight = (1.0 - self_weight) / sched.n_peers as f64;
    (self_weight, peer_weight)
}

/// Weighted vote score: sum of vote * weight over voting backends.
pub fn score_votes(rec: &VoteRecord, weights: &BTreeMap<String, f64>) -> Result<f64, ConsensusError> {
    let mut total_weight = 0.0;
    let mut score = 0.0;
    for (backend, vote) in &rec.votes {
        let w = weights
            .get(backend)
            .copied()
            .ok_or_else(|| ConsensusError::MissingWeight(backend.clone()))?;
        total_weight += w;
        score += f64::from(*vote) * w;
    }
    if (total_weight - 1.0).abs() > 1e-12 {
        return Err(ConsensusError::UnnormalizedWeights(total_weight));
    }
    Ok(score)
}

/// Creation-pass rule: retain a sample iff all four votes are affirmative.
pub fn filter_unanimous(records: &[VoteRecord]) -> Result<Vec<String>, ConsensusError> {
    let mut retained = Vec::new();
    for rec in records {
        if rec.votes.len() != 4 {
            return Err(ConsensusError::WrongVoterCount {
                sample_id: rec.sample_id.clone(),
                expected: 4,
                actual: rec.votes.len(),
            });
        }
        if rec.votes.iter().all(|(_, v)| *v == 1) {
            retained.push(rec.sample_id.clone());
        }
    }
    Ok(retained)
}

/// Refinement-pass rule: retain a sample iff its weighted score is strictly
/// above the threshold. The vote named `self_backend` carries the self
/// weight; every other vote carries the peer weight.
pub fn filter_weighted(
    records: &[VoteRecord],
    sched: &WeightSchedule,
    epoch: u32,
    threshold: f64,
    self_backend: &str,
) -> Result<Vec<String>, ConsensusError> {
    assert!(threshold > 0.0 && threshold < 1.0);
    let (self_weight, peer_weight) = compute_weights(sched, epoch);
    let mut retained = Vec::new();
    for rec in records {
        let weights: BTreeMap<String, f64> = rec
            .votes
            .iter()
            .map(|(name, _)| {
                let w = if name == self_backend { self_weight } else { peer_weight };
                (name.clone(), w)
            })
            .collect();
        let score = score_votes(rec, &weights)?;
        if score > threshold {
            retained.push(rec.sample_id.clone());
        }
    }
    Ok(retained)
}

/// Serializes vote records as JSONL, one record per line.
pub fn votes_to_jsonl(records: &[VoteRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("vote record serializes"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Parses a JSONL vote log.
pub fn votes_from_jsonl(text: &str) -> Result<Vec<VoteRecord>, serde_json::Error> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}
