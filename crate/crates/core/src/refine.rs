//! Self-refinement loop driver: evaluate the guardrail model on validation,
//! extract failures, let an analyzer propose policy additions, re-filter the
//! dataset by weighted consensus, emit training and preference manifests, and
//! stop when the dataset and accuracy stabilize.
//!
//! Model training itself is external: each iteration emits manifests and can
//! shell out to a configured trainer hook.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    encode_expected_answer, keyword_fallback, parse_moderation_output, qa_expected_answer,
    templated_reason, CodecError,
};
use crate::consensus::{filter_weighted, ConsensusError, VoteRecord, WeightSchedule};
use crate::gateway::{Gateway, GatewayError, ImageRef};
use crate::policy::{
    apply_policy_update, parse_policy, Policy, PolicyError, PolicyUpdate, TextBackend, UpdateOp,
};
use crate::prompt::{build_comprehension_prompt, build_qa_prompts, Mode, PromptBundle, PromptError};

#[derive(Debug, Error)]
pub enum RefineError {
    #[error("validation split is empty")]
    EmptyValidation,
    #[error("no retained training samples to emit")]
    EmptyTrainSet,
    #[error("weighted re-filtering requires iteration >= 1 (iteration 0 is the unanimous creation pass)")]
    IterationZeroFilter,
    #[error("prediction ids do not match validation ids: {0}")]
    IdMismatch(String),
    #[error("run directory io failure at {path:?}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("trainer hook exited with status {0}")]
    TrainerHookFailed(i32),
    #[error("no checkpoint found in {0:?}")]
    NoCheckpoint(PathBuf),
    #[error("checkpoint is unreadable: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Dataset partition. Fixed for a sample's lifetime; Test never enters
/// filtering, training manifests, or preference pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// One curated sample tracked across refinement iterations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub image_ref: ImageRef,
    pub label: String,
    pub split: Split,
    #[serde(default)]
    pub qa_refs: Vec<String>,
    pub retained: bool,
    pub last_score: Option<f64>,
}

impl SampleRecord {
    pub fn new(sample_id: impl Into<String>, image_ref: ImageRef, label: impl Into<String>, split: Split) -> Self {
        Self {
            sample_id: sample_id.into(),
            image_ref,
            label: label.into(),
            split,
            qa_refs: Vec::new(),
            retained: true,
            last_score: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: u32,
    pub val_accuracy: f64,
    pub removed_fraction: f64,
}

/// Whole-loop state; checkpointed to JSON between phases.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinementState {
    pub iteration: u32,
    pub policy: Policy,
    pub dataset_version: u32,
    pub samples: Vec<SampleRecord>,
    pub history: Vec<IterationStats>,
}

impl RefinementState {
    pub fn new(policy: Policy, samples: Vec<SampleRecord>) -> Self {
        Self { iteration: 0, policy, dataset_version: 0, samples, history: Vec::new() }
    }

    pub fn retained(&self, split: Split) -> Vec<&SampleRecord> {
        self.samples
            .iter()
            .filter(|s| s.split == split && s.retained)
            .collect()
    }
}

/// One preference pair: the canonical answer against the model's failure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DpoPair {
    pub sample_id: String,
    pub prompt: PromptBundle,
    pub accepted: String,
    pub rejected: String,
}

/// One validation prediction with the raw output kept for pair building.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub predicted_labels: BTreeSet<String>,
    pub raw_output: String,
    pub diagnostics: Vec<String>,
}

/// A misclassified validation sample.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Failure {
    pub sample_id: String,
    pub label: String,
    pub predicted_labels: BTreeSet<String>,
    pub raw_output: String,
}

/// Loop stop thresholds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StopCriteria {
    pub min_removed_fraction: f64,
    pub min_accuracy_delta: f64,
    pub max_iterations: u32,
}

impl Default for StopCriteria {
    fn default() -> Self {
        Self { min_removed_fraction: 0.01, min_accuracy_delta: 0.005, max_iterations: 6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    RemovedFraction,
    AccuracyPlateau,
    IterationCap,
}

impl StopReason {
    pub fn as_str(self) -> &'static str {
        match self {
            StopReason::RemovedFraction => "removed_fraction",
            StopReason::AccuracyPlateau => "accuracy_plateau",
            StopReason::IterationCap => "iteration_cap",
        }
    }
}

/// Runs comprehension-mode moderation over every retained validation sample.
/// Structured parse first, keyword fallback on parse failure; a sample whose
/// backend call fails outright counts as misclassified with a diagnostic.
pub fn evaluate_validation(
    state: &RefinementState,
    gateway: &Gateway,
    guardrail_backend: &str,
) -> Result<(Vec<Prediction>, f64), RefineError> {
    let validation = state.retained(Split::Validation);
    if validation.is_empty() {
        return Err(RefineError::EmptyValidation);
    }
    let prompt = build_comprehension_prompt(&state.policy);
    let mut predictions = Vec::with_capacity(validation.len());
    let mut correct = 0usize;
    for sample in &validation {
        let mut diagnostics = Vec::new();
        let (labels, raw_output) = match gateway.infer(guardrail_backend, &prompt, &sample.image_ref) {
            Ok(response) => {
                let report = parse_moderation_output(&response.text, &state.policy, Mode::Comprehension);
                let result = match report.result {
                    Some(r) if report.ok => r,
                    _ => {
                        diagnostics.extend(report.diagnostics);
                        keyword_fallback(&response.text, &state.policy)
                    }
                };
                (result.labels(&state.policy), response.text)
            }
            Err(e) => {
                diagnostics.push(format!("backend error, counted as misclassified: {e}"));
                (BTreeSet::new(), String::new())
            }
        };
        let truth: BTreeSet<String> = [sample.label.clone()].into_iter().collect();
        if labels == truth {
            correct += 1;
        }
        predictions.push(Prediction {
            sample_id: sample.sample_id.clone(),
            predicted_labels: labels,
            raw_output,
            diagnostics,
        });
    }
    let accuracy = correct as f64 / validation.len() as f64;
    Ok((predictions, accuracy))
}

/// Samples whose predicted label set differs from their ground truth.
pub fn extract_failures(
    state: &RefinementState,
    predictions: &[Prediction],
) -> Result<Vec<Failure>, RefineError> {
    let validation = state.retained(Split::Validation);
    let truth_by_id: BTreeMap<&str, &SampleRecord> =
        validation.iter().map(|s| (s.sample_id.as_str(), *s)).collect();
    if predictions.len() != validation.len() {
        return Err(RefineError::IdMismatch(format!(
            "{} predictions for {} validation samples",
            predictions.len(),
            validation.len()
        )));
    }
    let mut failures = Vec::new();
    for p in predictions {
        let sample = truth_by_id
            .get(p.sample_id.as_str())
            .ok_or_else(|| RefineError::IdMismatch(format!("unknown prediction id {:?}", p.sample_id)))?;
        let truth: BTreeSet<String> = [sample.label.clone()].into_iter().collect();
        if p.predicted_labels != truth {
            failures.push(Failure {
                sample_id: p.sample_id.clone(),
                label: sample.label.clone(),
                predicted_labels: p.predicted_labels.clone(),
                raw_output: p.raw_output.clone(),
            });
        }
    }
    Ok(failures)
}

/// Asks the analyzer whether the failures call for new categories. Proposed
/// blocks are parsed by the policy grammar; only genuinely new ids are added
/// (version bump). With no failures, no analyzer, an analyzer error, or no
/// parseable proposal the input policy comes back unchanged, never an error:
/// the loop must not wedge on a flaky analyzer.
pub fn propose_policy_update(
    failures: &[Failure],
    analyzer: Option<&dyn TextBackend>,
    policy: &Policy,
) -> Policy {
    let Some(analyzer) = analyzer else {
        return policy.clone();
    };
    if failures.is_empty() {
        return policy.clone();
    }
    let mut summary = String::from(
        "These image moderation failures occurred. If they involve content categories \
         not defined in the current policy, reply with one block per new category \
         (**Name**, then 'Core Value:' line, then '-' rule lines). Reply NONE otherwise.\n\n",
    );
    for f in failures.iter().take(50) {
        let predicted: Vec<&str> = f.predicted_labels.iter().map(String::as_str).collect();
        summary.push_str(&format!(
            "- sample {}: labeled {}, predicted [{}], output: {}\n",
            f.sample_id,
            f.label,
            predicted.join(", "),
            f.raw_output
        ));
    }
    let reply = match analyzer.complete(&summary) {
        Ok(r) => r,
        Err(e) => {
            log::warn!("analyzer unavailable, keeping policy v{}: {e}", policy.version);
            return policy.clone();
        }
    };
    if reply.trim().eq_ignore_ascii_case("NONE") {
        return policy.clone();
    }
    let proposed = match parse_policy(&reply, None) {
        Ok(p) => p,
        Err(e) => {
            log::warn!("analyzer proposal failed validation, keeping policy v{}: {e}", policy.version);
            return policy.clone();
        }
    };
    let ops: Vec<UpdateOp> = proposed
        .categories
        .into_iter()
        .filter(|c| policy.category(&c.id).is_none())
        .map(UpdateOp::Add)
        .collect();
    if ops.is_empty() {
        return policy.clone();
    }
    let update = PolicyUpdate { ops, source: "analyzer proposal from failure review".to_string() };
    match apply_policy_update(policy, &update) {
        Ok(updated) => updated,
        Err(e) => {
            log::warn!("analyzer update rejected, keeping policy v{}: {e}", policy.version);
            policy.clone()
        }
    }
}

/// Weighted consensus re-filtering of all retained Train and Validation
/// samples at the current iteration. Each sample gets one membership vote
/// from the guardrail backend (self) and one from each peer; ambiguous or
/// failed votes count 0. Returns the removed fraction and the vote log.
pub fn refilter_dataset(
    state: &mut RefinementState,
    gateway: &Gateway,
    self_backend: &str,
    peer_backends: &[String],
    schedule: &WeightSchedule,
    threshold: f64,
) -> Result<(f64, Vec<VoteRecord>), RefineError> {
    if state.iteration == 0 {
        return Err(RefineError::IterationZeroFilter);
    }
    let epoch = state.iteration;
    let mut records = Vec::new();
    let mut eligible_ids = Vec::new();
    for sample in &state.samples {
        if sample.split == Split::Test || !sample.retained {
            continue;
        }
        let category = match state.policy.category(&sample.label) {
            Some(c) => c.clone(),
            None => {
                // label outside the current policy cannot be voted on; drop it
                eligible_ids.push(sample.sample_id.clone());
                records.push(VoteRecord::new(
                    sample.sample_id.clone(),
                    std::iter::once(self_backend)
                        .chain(peer_backends.iter().map(String::as_str))
                        .map(|b| (b.to_string(), 0u8))
                        .collect(),
                    epoch,
                ));
                continue;
            }
        };
        let mut votes = Vec::with_capacity(1 + peer_backends.len());
        for backend in std::iter::once(self_backend).chain(peer_backends.iter().map(String::as_str)) {
            let vote = gateway
                .ask_membership(backend, &category, &sample.image_ref)
                .unwrap_or(0);
            votes.push((backend.to_string(), vote));
        }
        eligible_ids.push(sample.sample_id.clone());
        records.push(VoteRecord::new(sample.sample_id.clone(), votes, epoch));
    }
    let retained_ids: BTreeSet<String> =
        filter_weighted(&records, schedule, epoch, threshold, self_backend)?
            .into_iter()
            .collect();
    let previously_retained = eligible_ids.len();
    let mut removed = 0usize;
    for sample in &mut state.samples {
        if !eligible_ids.contains(&sample.sample_id) {
            continue;
        }
        let keep = retained_ids.contains(&sample.sample_id);
        if !keep {
            removed += 1;
        }
        sample.retained = keep;
    }
    // score bookkeeping for audit
    let (self_w, peer_w) = crate::consensus::compute_weights(schedule, epoch);
    for rec in &records {
        let score: f64 = rec
            .votes
            .iter()
            .map(|(b, v)| {
                let w = if b == self_backend { self_w } else { peer_w };
                f64::from(*v) * w
            })
            .sum();
        if let Some(sample) = state.samples.iter_mut().find(|s| s.sample_id == rec.sample_id) {
            sample.last_score = Some(score);
        }
    }
    let removed_fraction = if previously_retained == 0 {
        0.0
    } else {
        removed as f64 / previously_retained as f64
    };
    Ok((removed_fraction, records))
}

/// One preference pair per failure: the canonical ground-truth answer as
/// accepted, the model's original output as rejected. Pairs whose sides
/// coincide are dropped (impossible for a true failure).
pub fn build_dpo_pairs(
    failures: &[Failure],
    policy: &Policy,
) -> Result<Vec<DpoPair>, RefineError> {
    let prompt = build_comprehension_prompt(policy);
    let mut pairs = Vec::with_capacity(failures.len());
    for f in failures {
        let reason = templated_reason(&f.label, policy);
        let accepted =
            encode_expected_answer(&[f.label.as_str()], Some(&reason), Mode::Comprehension, policy)?;
        if accepted == f.raw_output {
            continue;
        }
        pairs.push(DpoPair {
            sample_id: f.sample_id.clone(),
            prompt: prompt.clone(),
            accepted,
            rejected: f.raw_output.clone(),
        });
    }
    Ok(pairs)
}

/// Stop decision over the run history: dataset stabilized, accuracy
/// plateaued, or the hard iteration cap.
pub fn should_stop(history: &[IterationStats], criteria: &StopCriteria) -> Option<StopReason> {
    let latest = history.last()?;
    if latest.iteration >= criteria.max_iterations {
        return Some(StopReason::IterationCap);
    }
    if latest.removed_fraction < criteria.min_removed_fraction {
        return Some(StopReason::RemovedFraction);
    }
    if history.len() >= 2 {
        let previous = &history[history.len() - 2];
        if latest.val_accuracy - previous.val_accuracy < criteria.min_accuracy_delta {
            return Some(StopReason::AccuracyPlateau);
        }
    }
    None
}

/// Files written for the external trainer each iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestPaths {
    pub train: PathBuf,
    pub dpo: PathBuf,
    pub meta: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct TrainRow<'a> {
    sample_id: &'a str,
    mode: Mode,
    prompt: &'a str,
    answer: String,
}

fn write_file(path: &Path, contents: &str) -> Result<(), RefineError> {
    std::fs::write(path, contents).map_err(|source| RefineError::Io { path: path.to_path_buf(), source })
}

/// Writes the versioned training manifest (six QA rows per retained Train
/// sample), the DPO-pairs manifest, and the iteration metadata file under the
/// run directory. Deterministic: unchanged state re-emits identical bytes.
pub fn emit_training_manifest(
    state: &RefinementState,
    dpo_pairs: &[DpoPair],
    run_dir: &Path,
) -> Result<ManifestPaths, RefineError> {
    let train_samples = state.retained(Split::Train);
    if train_samples.is_empty() {
        return Err(RefineError::EmptyTrainSet);
    }
    std::fs::create_dir_all(run_dir)
        .map_err(|source| RefineError::Io { path: run_dir.to_path_buf(), source })?;
    let v = state.dataset_version;

    let mut train_lines = Vec::new();
    for sample in &train_samples {
        let bundles = build_qa_prompts(&sample.label, &state.policy)?;
        for bundle in bundles {
            let answer = qa_expected_answer(bundle.mode, &sample.label, &state.policy, None)?;
            let row = TrainRow {
                sample_id: &sample.sample_id,
                mode: bundle.mode,
                prompt: &bundle.user_text,
                answer,
            };
            train_lines.push(serde_json::to_string(&row).expect("row serializes"));
        }
    }
    let train = run_dir.join(format!("train_v{v}.jsonl"));
    write_file(&train, &(train_lines.join("\n") + "\n"))?;

    let dpo = run_dir.join(format!("dpo_v{v}.jsonl"));
    let dpo_lines: Vec<String> = dpo_pairs
        .iter()
        .map(|p| serde_json::to_string(p).expect("pair serializes"))
        .collect();
    write_file(&dpo, &(dpo_lines.join("\n") + "\n"))?;

    let meta = run_dir.join(format!("meta_v{v}.json"));
    let meta_doc = serde_json::json!({
        "iteration": state.iteration,
        "dataset_version": state.dataset_version,
        "policy_version": state.policy.version,
        "retained_train": train_samples.len(),
        "retained_validation": state.retained(Split::Validation).len(),
        "dpo_pairs": dpo_pairs.len(),
    });
    write_file(&meta, &serde_json::to_string_pretty(&meta_doc).expect("meta serializes"))?;

    Ok(ManifestPaths { train, dpo, meta })
}

/// Invokes the configured trainer shell command with the three manifest
/// paths appended as arguments.
pub fn run_trainer_hook(command: &str, paths: &ManifestPaths) -> Result<(), RefineError> {
    let full = format!(
        "{command} {} {} {}",
        paths.train.display(),
        paths.dpo.display(),
        paths.meta.display()
    );
    let status = std::process::Command::new("sh")
        .arg("-c")
        .arg(&full)
        .status()
        .map_err(|source| RefineError::Io { path: PathBuf::from(command), source })?;
    if status.success() {
        Ok(())
    } else {
        Err(RefineError::TrainerHookFailed(status.code().unwrap_or(-1)))
    }
}

/// Writes the per-iteration JSON checkpoint.
pub fn save_checkpoint(state: &RefinementState, run_dir: &Path) -> Result<PathBuf, RefineError> {
    std::fs::create_dir_all(run_dir)
        .map_err(|source| RefineError::Io { path: run_dir.to_path_buf(), source })?;
    let path = run_dir.join(format!("state_v{}.json", state.iteration));
    write_file(&path, &serde_json::to_string_pretty(state).expect("state serializes"))?;
    Ok(path)
}

/// Loads the highest-numbered checkpoint in the run directory.
pub fn load_latest_checkpoint(run_dir: &Path) -> Result<RefinementState, RefineError> {
    let entries = std::fs::read_dir(run_dir)
        .map_err(|source| RefineError::Io { path: run_dir.to_path_buf(), source })?;
    let mut best: Option<(u32, PathBuf)> = None;
    for entry in entries {
        let entry = entry.map_err(|source| RefineError::Io { path: run_dir.to_path_buf(), source })?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(v) = name
            .strip_prefix("state_v")
            .and_then(|rest| rest.strip_suffix(".json"))
            .and_then(|n| n.parse::<u32>().ok())
        {
            if best.as_ref().map(|(b, _)| v > *b).unwrap_or(true) {
                best = Some((v, entry.path()));
            }
        }
    }
    let (_, path) = best.ok_or_else(|| RefineError::NoCheckpoint(run_dir.to_path_buf()))?;
    let text = std::fs::read_to_string(&path).map_err(|source| RefineError::Io { path, source })?;
    serde_json::from_str(&text).map_err(|e| RefineError::CorruptCheckpoint(e.to_string()))
}

/// Loop configuration.
#[derive(Debug, Clone)]
pub struct RefineConfig {
    pub self_backend: String,
    pub peer_backends: Vec<String>,
    pub schedule: WeightSchedule,
    pub threshold: f64,
    pub stop: StopCriteria,
    pub run_dir: PathBuf,
    pub trainer_hook: Option<String>,
}

/// What a full run did.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub iterations_run: u32,
    pub stop_reason: StopReason,
    pub final_val_accuracy: f64,
    pub final_removed_fraction: f64,
    pub dpo_pairs_emitted: usize,
    pub history: Vec<IterationStats>,
}

/// Drives the loop to termination. Each iteration evaluates the current
/// model against the previous iteration's policy, applies any analyzer
/// policy update, re-filters at the new epoch, emits manifests, checkpoints,
/// then consults the stop criteria.
pub fn run_refinement(
    mut state: RefinementState,
    gateway: &Gateway,
    analyzer: Option<&dyn TextBackend>,
    config: &RefineConfig,
) -> Result<RunReport, RefineError> {
    let mut total_pairs = 0usize;
    loop {
        let (predictions, val_accuracy) = evaluate_validation(&state, gateway, &config.self_backend)?;
        let failures = extract_failures(&state, &predictions)?;
        state.policy = propose_policy_update(&failures, analyzer, &state.policy);
        state.iteration += 1;
        state.dataset_version = state.iteration;
        let (removed_fraction, _votes) = refilter_dataset(
            &mut state,
            gateway,
            &config.self_backend,
            &config.peer_backends,
            &config.schedule,
            config.threshold,
        )?;
        let pairs = build_dpo_pairs(&failures, &state.policy)?;
        total_pairs += pairs.len();
        let paths = emit_training_manifest(&state, &pairs, &config.run_dir)?;
        if let Some(hook) = &config.trainer_hook {
            run_trainer_hook(hook, &paths)?;
        }
        state.history.push(IterationStats {
            iteration: state.iteration,
            val_accuracy,
            removed_fraction,
        });
        save_checkpoint(&state, &config.run_dir)?;
        if let Some(reason) = should_stop(&state.history, &config.stop) {
            let latest = *state.history.last().expect("history non-empty");
            return Ok(RunReport {
                iterations_run: state.iteration,
                stop_reason: reason,
                final_val_accuracy: latest.val_accuracy,
                final_removed_fraction: latest.removed_fraction,
                dpo_pairs_emitted: total_pairs,
                history: state.history.clone(),
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{BackendSpec, ErrorPlan, MockEngine, Role};
    use crate::policy::test_fixtures::ten_cat_policy;

    fn oracle_gateway(plan: ErrorPlan) -> Gateway {
        let mut gw = Gateway::new();
        gw.add_mock(
            BackendSpec::mock("self", Role::Guardrail),
            MockEngine::new(ten_cat_policy()).with_error_plan(plan),
        );
        for name in ["p1", "p2", "p3"] {
            gw.add_mock(BackendSpec::mock(name, Role::Peer), MockEngine::new(ten_cat_policy()));
        }
        gw
    }

    fn synthetic_state(n: usize) -> RefinementState {
        let labels = ["Hate", "Violence", "Sexual", "Crime", "Safe", "Political"];
        let samples: Vec<SampleRecord> = (0..n)
            .map(|i| {
                let split = match i % 4 {
                    0 | 1 => Split::Train,
                    2 => Split::Validation,
                    _ => Split::Test,
                };
                let label = labels[i % labels.len()];
                SampleRecord::new(
                    format!("s{i:03}"),
                    ImageRef::Tag(format!("{label}#{i}")),
                    label,
                    split,
                )
            })
            .collect();
        RefinementState::new(ten_cat_policy(), samples)
    }

    fn config(dir: &Path) -> RefineConfig {
        RefineConfig {
            self_backend: "self".into(),
            peer_backends: vec!["p1".into(), "p2".into(), "p3".into()],
            schedule: WeightSchedule::new(0.1, 3),
            threshold: 0.5,
            stop: StopCriteria::default(),
            run_dir: dir.to_path_buf(),
            trainer_hook: None,
        }
    }

    #[test]
    fn oracle_validation_is_perfect() {
        let state = synthetic_state(24);
        let gw = oracle_gateway(ErrorPlan::none());
        let (predictions, accuracy) = evaluate_validation(&state, &gw, "self").unwrap();
        assert_eq!(accuracy, 1.0);
        assert_eq!(predictions.len(), state.retained(Split::Validation).len());
        let failures = extract_failures(&state, &predictions).unwrap();
        assert!(failures.is_empty());
    }

    #[test]
    fn empty_validation_is_an_error() {
        let mut state = synthetic_state(24);
        state.samples.retain(|s| s.split != Split::Validation);
        let gw = oracle_gateway(ErrorPlan::none());
        assert!(matches!(
            evaluate_validation(&state, &gw, "self"),
            Err(RefineError::EmptyValidation)
        ));
    }

    #[test]
    fn planned_error_rate_shows_up_exactly() {
        let state = synthetic_state(40);
        let validation_keys: Vec<String> = state
            .retained(Split::Validation)
            .iter()
            .map(|s| s.image_ref.key())
            .collect();
        let n = validation_keys.len();
        let plan = ErrorPlan::from_roster(&validation_keys, 0.2, 17);
        let planned_flips = plan.flip_count();
        assert_eq!(planned_flips, (0.2 * n as f64).round() as usize);
        let gw = oracle_gateway(plan);
        let (predictions, accuracy) = evaluate_validation(&state, &gw, "self").unwrap();
        assert_eq!(accuracy, 1.0 - planned_flips as f64 / n as f64);
        let failures = extract_failures(&state, &predictions).unwrap();
        assert_eq!(failures.len(), planned_flips);
    }

    #[test]
    fn analyzer_can_add_a_category() {
        struct Scripted;
        impl TextBackend for Scripted {
            fn complete(&self, _prompt: &str) -> Result<String, String> {
                Ok("**Gambling**\nCore Value: All the images depicting gambling.\n- casino floors\n- betting slips".into())
            }
        }
        let policy = ten_cat_policy();
        let failures = vec![Failure {
            sample_id: "x".into(),
            label: "Safe".into(),
            predicted_labels: BTreeSet::new(),
            raw_output: "a roulette wheel".into(),
        }];
        let updated = propose_policy_update(&failures, Some(&Scripted), &policy);
        assert_eq!(updated.version, policy.version + 1);
        assert!(updated.category("Gambling").is_some());
        // empty failure set leaves the policy alone
        let same = propose_policy_update(&[], Some(&Scripted), &policy);
        assert_eq!(same.version, policy.version);
    }

    #[test]
    fn analyzer_failure_degrades_to_unchanged_policy() {
        struct Dead;
        impl TextBackend for Dead {
            fn complete(&self, _prompt: &str) -> Result<String, String> {
                Err("timeout".into())
            }
        }
        struct Noisy;
        impl TextBackend for Noisy {
            fn complete(&self, _prompt: &str) -> Result<String, String> {
                Ok("sorry, I cannot help with that".into())
            }
        }
        let policy = ten_cat_policy();
        let failures = vec![Failure {
            sample_id: "x".into(),
            label: "Hate".into(),
            predicted_labels: BTreeSet::new(),
            raw_output: "?".into(),
        }];
        assert_eq!(propose_policy_update(&failures, Some(&Dead), &policy).version, policy.version);
        assert_eq!(propose_policy_update(&failures, Some(&Noisy), &policy).version, policy.version);
        assert_eq!(propose_policy_update(&failures, None, &policy).version, policy.version);
    }

    #[test]
    fn refilter_requires_iteration_one() {
        let mut state = synthetic_state(12);
        let gw = oracle_gateway(ErrorPlan::none());
        let sched = WeightSchedule::new(0.1, 3);
        let peers = vec!["p1".to_string(), "p2".to_string(), "p3".to_string()];
        assert!(matches!(
            refilter_dataset(&mut state, &gw, "self", &peers, &sched, 0.5),
            Err(RefineError::IterationZeroFilter)
        ));
    }

    #[test]
    fn refilter_with_agreeing_mocks_removes_nothing() {
        let mut state = synthetic_state(20);
        state.iteration = 1;
        state.dataset_version = 1;
        let gw = oracle_gateway(ErrorPlan::none());
        let peers = vec!["p1".to_string(), "p2".to_string(), "p3".to_string()];
        let (removed, votes) =
            refilter_dataset(&mut state, &gw, "self", &peers, &WeightSchedule::new(0.1, 3), 0.5)
                .unwrap();
        assert_eq!(removed, 0.0);
        assert!(state.samples.iter().all(|s| s.retained));
        // every eligible sample voted with 4 backends
        assert!(votes.iter().all(|v| v.votes.len() == 4));
        // Test-split samples never appear in the vote log
        let test_ids: BTreeSet<&str> = state
            .samples
            .iter()
            .filter(|s| s.split == Split::Test)
            .map(|s| s.sample_id.as_str())
            .collect();
        assert!(votes.iter().all(|v| !test_ids.contains(v.sample_id.as_str())));
    }

    #[test]
    fn disagreeing_peers_remove_their_samples() {
        let mut state = synthetic_state(20);
        state.iteration = 1;
        state.dataset_version = 1;
        // peers flip exactly two eligible samples
        let eligible: Vec<String> = state
            .samples
            .iter()
            .filter(|s| s.split != Split::Test)
            .map(|s| s.image_ref.key())
            .take(2)
            .collect();
        let plan = ErrorPlan::from_roster(&eligible, 1.0, 3);
        let mut gw = Gateway::new();
        gw.add_mock(BackendSpec::mock("self", Role::Guardrail), MockEngine::new(ten_cat_policy()));
        for name in ["p1", "p2", "p3"] {
            gw.add_mock(
                BackendSpec::mock(name, Role::Peer),
                MockEngine::new(ten_cat_policy()).with_error_plan(plan.clone()),
            );
        }
        let peers = vec!["p1".to_string(), "p2".to_string(), "p3".to_string()];
        let n_eligible = state.samples.iter().filter(|s| s.split != Split::Test).count();
        let (removed, _) =
            refilter_dataset(&mut state, &gw, "self", &peers, &WeightSchedule::new(0.1, 3), 0.5)
                .unwrap();
        // all three peers vote 0: score = self weight 0.1 < 0.5
        assert!((removed - 2.0 / n_eligible as f64).abs() < 1e-12);
    }

    #[test]
    fn dpo_pairs_one_per_failure() {
        let policy = ten_cat_policy();
        let failures: Vec<Failure> = (0..3)
            .map(|i| Failure {
                sample_id: format!("f{i}"),
                label: "Sexual".into(),
                predicted_labels: ["Hate".to_string()].into_iter().collect(),
                raw_output: "{'MODERATION_RESULT': {'<|Hate|>': true}}".into(),
            })
            .collect();
        let pairs = build_dpo_pairs(&failures, &policy).unwrap();
        assert_eq!(pairs.len(), 3);
        for (pair, failure) in pairs.iter().zip(&failures) {
            assert_eq!(pair.sample_id, failure.sample_id);
            assert_ne!(pair.accepted, pair.rejected);
            let report = parse_moderation_output(&pair.accepted, &policy, Mode::Comprehension);
            assert!(report.result.unwrap().flags.contains_key("Sexual"));
        }
        assert!(build_dpo_pairs(&[], &policy).unwrap().is_empty());
    }

    #[test]
    fn stop_rules() {
        let criteria = StopCriteria::default();
        let entry = |iteration, acc, removed| IterationStats {
            iteration,
            val_accuracy: acc,
            removed_fraction: removed,
        };
        assert_eq!(
            should_stop(&[entry(1, 0.9, 0.008)], &criteria),
            Some(StopReason::RemovedFraction)
        );
        assert_eq!(should_stop(&[entry(1, 0.9, 0.05)], &criteria), None);
        assert_eq!(
            should_stop(&[entry(1, 0.80, 0.05), entry(2, 0.83, 0.05)], &criteria),
            None
        );
        assert_eq!(
            should_stop(&[entry(1, 0.83, 0.05), entry(2, 0.832, 0.05)], &criteria),
            Some(StopReason::AccuracyPlateau)
        );
        assert_eq!(
            should_stop(&[entry(6, 0.5, 0.5)], &criteria),
            Some(StopReason::IterationCap)
        );
        assert_eq!(should_stop(&[], &criteria), None);
    }

    #[test]
    fn manifests_have_six_rows_per_sample_and_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut state = synthetic_state(24);
        state.iteration = 1;
        state.dataset_version = 1;
        let paths = emit_training_manifest(&state, &[], dir.path()).unwrap();
        assert!(paths.train.file_name().unwrap().to_str().unwrap().contains("v1"));
        let text = std::fs::read_to_string(&paths.train).unwrap();
        let rows = text.lines().count();
        assert_eq!(rows, 6 * state.retained(Split::Train).len());
        // re-emission is byte-identical
        emit_training_manifest(&state, &[], dir.path()).unwrap();
        assert_eq!(std::fs::read_to_string(&paths.train).unwrap(), text);
        // Test ids never leak into manifests
        for s in state.samples.iter().filter(|s| s.split == Split::Test) {
            assert!(!text.contains(&s.sample_id));
        }
        let meta: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&paths.meta).unwrap()).unwrap();
        assert_eq!(meta["dataset_version"], 1);
    }

    #[test]
    fn full_loop_with_oracle_mocks_stops_fast() {
        let dir = tempfile::tempdir().unwrap();
        let state = synthetic_state(24);
        let gw = oracle_gateway(ErrorPlan::none());
        let report = run_refinement(state, &gw, None, &config(dir.path())).unwrap();
        assert!(report.iterations_run <= 2, "ran {}", report.iterations_run);
        assert_eq!(report.stop_reason, StopReason::RemovedFraction);
        assert_eq!(report.final_val_accuracy, 1.0);
        assert!(report.final_removed_fraction < 0.01);
        assert_eq!(report.dpo_pairs_emitted, 0);
    }

    #[test]
    fn checkpoint_restart_reproduces_final_state() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let gw = oracle_gateway(ErrorPlan::none());

        // uninterrupted run
        let report_full = run_refinement(synthetic_state(24), &gw, None, &config(dir_a.path())).unwrap();

        // "crash" after checkpointing iteration 1 manually, then restart
        let mut state = synthetic_state(24);
        let cfg = config(dir_b.path());
        let (predictions, val_accuracy) = evaluate_validation(&state, &gw, "self").unwrap();
        let failures = extract_failures(&state, &predictions).unwrap();
        state.policy = propose_policy_update(&failures, None, &state.policy);
        state.iteration = 1;
        state.dataset_version = 1;
        let (removed_fraction, _) = refilter_dataset(
            &mut state,
            &gw,
            &cfg.self_backend,
            &cfg.peer_backends,
            &cfg.schedule,
            cfg.threshold,
        )
        .unwrap();
        state.history.push(IterationStats { iteration: 1, val_accuracy, removed_fraction });
        save_checkpoint(&state, dir_b.path()).unwrap();

        let resumed = load_latest_checkpoint(dir_b.path()).unwrap();
        assert_eq!(resumed.iteration, 1);
        assert_eq!(resumed.history.len(), 1);
        // the resumed state already satisfies the stop rule, matching the
        // uninterrupted run's endpoint
        let reason = should_stop(&resumed.history, &cfg.stop).unwrap();
        assert_eq!(reason, report_full.stop_reason);
        assert_eq!(resumed.history.last().unwrap().val_accuracy, report_full.final_val_accuracy);
    }

    #[test]
    fn missing_checkpoint_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_latest_checkpoint(dir.path()),
            Err(RefineError::NoCheckpoint(_))
        ));
    }

    #[test]
    fn retained_sets_shrink_monotonically() {
        let mut state = synthetic_state(24);
        state.iteration = 1;
        state.dataset_version = 1;
        // all peers wrong on everything: every eligible sample is removed
        let all_keys: Vec<String> = state.samples.iter().map(|s| s.image_ref.key()).collect();
        let plan = ErrorPlan::from_roster(&all_keys, 1.0, 1);
        let mut gw = Gateway::new();
        gw.add_mock(
            BackendSpec::mock("self", Role::Guardrail),
            MockEngine::new(ten_cat_policy()).with_error_plan(plan.clone()),
        );
        for name in ["p1", "p2", "p3"] {
            gw.add_mock(
                BackendSpec::mock(name, Role::Peer),
                MockEngine::new(ten_cat_policy()).with_error_plan(plan.clone()),
            );
        }
        let peers = vec!["p1".to_string(), "p2".to_string(), "p3".to_string()];
        let before: BTreeSet<String> = state
            .samples
            .iter()
            .filter(|s| s.retained)
            .map(|s| s.sample_id.clone())
            .collect();
        refilter_dataset(&mut state, &gw, "self", &peers, &WeightSchedule::new(0.1, 3), 0.5).unwrap();
        let after: BTreeSet<String> = state
            .samples
            .iter()
            .filter(|s| s.retained)
            .map(|s| s.sample_id.clone())
            .collect();
        assert!(after.is_subset(&before));
        // Test-split samples are untouched by filtering
        assert!(state
            .samples
            .iter()
            .filter(|s| s.split == Split::Test)
            .all(|s| s.retained));
    }

    #[test]
    fn trainer_hook_runs_and_fails_loudly() {
        let dir = tempfile::tempdir().unwrap();
        let paths = ManifestPaths {
            train: dir.path().join("train_v1.jsonl"),
            dpo: dir.path().join("dpo_v1.jsonl"),
            meta: dir.path().join("meta_v1.json"),
        };
        let marker = dir.path().join("hook_ran");
        run_trainer_hook(&format!("touch {}; true", marker.display()), &paths).unwrap();
        assert!(marker.exists());
        assert!(matches!(
            run_trainer_hook("exit 3", &paths),
            Err(RefineError::TrainerHookFailed(3))
        ));
    }
}
