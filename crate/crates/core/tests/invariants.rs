//! Property-based invariants across the pipeline math and codecs.

use std::collections::BTreeSet;

use ndarray::{Array2, Array3};
use proptest::prelude::*;

use guardrail_core::codec::{encode_expected_answer, keyword_fallback, parse_moderation_output};
use guardrail_core::consensus::{filter_weighted, VoteRecord, WeightSchedule};
use guardrail_core::eval::metrics::auprc_stepwise;
use guardrail_core::loss::weighted_loss;
use guardrail_core::policy::test_fixtures::ten_cat_policy;
use guardrail_core::prompt::Mode;

fn label_subset() -> impl Strategy<Value = Vec<usize>> {
    proptest::collection::btree_set(0usize..10, 0..=3).prop_map(|s| s.into_iter().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn codec_round_trip_arbitrary_subsets(indices in label_subset(), mode_pick in 0u8..2) {
        let policy = ten_cat_policy();
        let labels: Vec<&str> = indices.iter().map(|&i| policy.categories[i].id.as_str()).collect();
        let mode = if mode_pick == 0 { Mode::Classification } else { Mode::Comprehension };
        let reason = if mode.expects_reason() { Some("because") } else { None };
        let encoded = encode_expected_answer(&labels, reason, mode, &policy).unwrap();
        let report = parse_moderation_output(&encoded, &policy, mode);
        prop_assert!(report.ok);
        let parsed = report.result.unwrap();
        let expected: BTreeSet<String> = {
            let non_safe: BTreeSet<String> =
                labels.iter().filter(|l| **l != "Safe").map(|l| l.to_string()).collect();
            if non_safe.is_empty() { ["Safe".to_string()].into_iter().collect() } else { non_safe }
        };
        prop_assert_eq!(parsed.labels(&policy), expected);
    }

    #[test]
    fn keyword_fallback_only_emits_policy_ids(text in ".{0,200}") {
        let policy = ten_cat_policy();
        let result = keyword_fallback(&text, &policy);
        let ids: BTreeSet<&str> = policy.categories.iter().map(|c| c.id.as_str()).collect();
        for flag in result.flags.keys() {
            prop_assert!(ids.contains(flag.as_str()));
        }
        // the safe class never appears as an explicit flag
        prop_assert!(!result.flags.contains_key("Safe"));
    }

    #[test]
    fn vote_flip_up_never_removes(
        votes in proptest::collection::vec(0u8..=1, 4),
        flip_idx in 0usize..4,
        epoch in 1u32..8,
    ) {
        let sched = WeightSchedule::new(0.1, 3);
        let names = ["self", "p1", "p2", "p3"];
        let rec = |vs: &[u8]| VoteRecord::new(
            "s",
            names.iter().zip(vs).map(|(n, v)| (n.to_string(), *v)).collect(),
            epoch,
        );
        let before = filter_weighted(&[rec(&votes)], &sched, epoch, 0.5, "self").unwrap();
        let mut flipped = votes.clone();
        flipped[flip_idx] = 1;
        let after = filter_weighted(&[rec(&flipped)], &sched, epoch, 0.5, "self").unwrap();
        // retention is monotone in votes
        prop_assert!(before.len() <= after.len());
    }

    #[test]
    fn weighted_loss_scale_invariant(
        entries in proptest::collection::vec((0.0f64..10.0, 0.1f64..5.0), 1..20),
        scale in 0.01f64..100.0,
    ) {
        let n = entries.len();
        let losses = Array2::from_shape_vec((1, n), entries.iter().map(|(l, _)| *l).collect()).unwrap();
        let mask = Array2::from_shape_vec((1, n), entries.iter().map(|(_, m)| *m).collect()).unwrap();
        let base = weighted_loss(&losses, &mask).unwrap();
        let scaled = weighted_loss(&losses, &mask.mapv(|m| m * scale)).unwrap();
        prop_assert!((base - scaled).abs() <= 1e-12 * base.abs().max(1.0));
    }

    #[test]
    fn auprc_bounded_and_perfect_ranker_is_one(
        scored in proptest::collection::vec((0u8..=10, any::<bool>()), 1..30),
    ) {
        let items: Vec<(f64, bool)> = scored.iter().map(|(s, p)| (*s as f64 / 10.0, *p)).collect();
        let area = auprc_stepwise(&items);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&area));
        // a perfect two-level ranking of the same labels scores 1 (if any positive)
        if items.iter().any(|(_, p)| *p) {
            let perfect: Vec<(f64, bool)> =
                items.iter().map(|(_, p)| (if *p { 1.0 } else { 0.0 }, *p)).collect();
            prop_assert!((auprc_stepwise(&perfect) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lenient_parse_accepts_strict_emissions(indices in label_subset()) {
        // anything the strict serializer emits must parse back structurally
        let policy = ten_cat_policy();
        let labels: Vec<&str> = indices.iter().map(|&i| policy.categories[i].id.as_str()).collect();
        let encoded = encode_expected_answer(&labels, None, Mode::Classification, &policy).unwrap();
        let strict = encoded.replace('\'', "\"");
        let lenient_report = parse_moderation_output(&encoded, &policy, Mode::Classification);
        let strict_report = parse_moderation_output(&strict, &policy, Mode::Classification);
        prop_assert!(lenient_report.ok && strict_report.ok);
        prop_assert_eq!(
            lenient_report.result.unwrap().flags,
            strict_report.result.unwrap().flags
        );
    }
}

#[test]
fn loss_gradient_matches_on_random_shapes() {
    use guardrail_core::loss::{grad_check, TokenWeightConfig};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
    for _ in 0..5 {
        let (n, t, v) = (rng.gen_range(1..3), rng.gen_range(1..4), rng.gen_range(2..8));
        let mut logits = Array3::zeros((n, t, v));
        logits.mapv_inplace(|_: f64| rng.gen_range(-2.0..2.0));
        let targets = Array2::from_shape_fn((n, t), |_| rng.gen_range(0..v));
        let cfg = TokenWeightConfig::new([0].into_iter().collect(), 5.0, 1.0);
        assert!(grad_check(&logits, &targets, &cfg, 1e-5).unwrap() < 1e-4);
    }
}
