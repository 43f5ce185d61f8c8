//! Explanation quality scoring by an external judge model.

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::policy::TextBackend;

use super::EvalError;

/// Fixed rubric sent with every explanation.
pub const JUDGE_RUBRIC: &str = "Rate the following image moderation explanation on a scale of 0 to 10, \
considering three criteria: precision, conciseness, and consistency with the image. \
Reply with one overall score.";

/// Per-item scores and their mean. Items whose replies never yield a number
/// are skipped and counted.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeOutcome {
    pub per_item: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub scored: usize,
    pub skipped: usize,
    pub diagnostics: Vec<String>,
}

/// Pulls a 0-10 score out of a judge reply. Accepts bare numbers and
/// `N/10`-style fractions; the first in-range number wins.
pub fn parse_judge_score(reply: &str) -> Option<f64> {
    let number = Regex::new(r"(\d+(?:\.\d+)?)(?:\s*/\s*10)?").unwrap();
    for cap in number.captures_iter(reply) {
        if let Ok(value) = cap[1].parse::<f64>() {
            if (0.0..=10.0).contains(&value) {
                return Some(value);
            }
        }
    }
    None
}

/// Scores each explanation with the judge backend. Unparseable replies are
/// retried once, then skipped with a diagnostic. With zero scorable items the
/// outcome carries no mean rather than failing.
pub fn judge_explanations(
    judge: &dyn TextBackend,
    explanations: &[String],
) -> Result<JudgeOutcome, EvalError> {
    if explanations.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut per_item = Vec::with_capacity(explanations.len());
    let mut diagnostics = Vec::new();
    let mut backend_failures = 0usize;
    for (i, explanation) in explanations.iter().enumerate() {
        let prompt = format!("{JUDGE_RUBRIC}\n\nExplanation: {explanation}");
        let mut score = None;
        for _attempt in 0..2 {
            match judge.complete(&prompt) {
                Ok(reply) => {
                    score = parse_judge_score(&reply);
                    if score.is_some() {
                        break;
                    }
                }
                Err(e) => {
                    backend_failures += 1;
                    diagnostics.push(format!("item {i}: judge call failed: {e}"));
                }
            }
        }
        if score.is_none() {
            diagnostics.push(format!("item {i}: no parseable 0-10 score, skipped"));
        }
        per_item.push(score);
    }
    if backend_failures >= 2 * explanations.len() {
        return Err(EvalError::JudgeUnavailable);
    }
    let scored: Vec<f64> = per_item.iter().flatten().copied().collect();
    let mean = if scored.is_empty() {
        None
    } else {
        Some(scored.iter().sum::<f64>() / scored.len() as f64)
    };
    Ok(JudgeOutcome {
        scored: scored.len(),
        skipped: per_item.len() - scored.len(),
        per_item,
        mean,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    struct ScriptedJudge {
        replies: Mutex<Vec<Result<String, String>>>,
    }

    impl ScriptedJudge {
        fn new(replies: Vec<Result<String, String>>) -> Self {
            let mut replies = replies;
            replies.reverse();
            Self { replies: Mutex::new(replies) }
        }
    }

    impl TextBackend for ScriptedJudge {
        fn complete(&self, _prompt: &str) -> Result<String, String> {
            self.replies
                .lock()
                .unwrap()
                .pop()
                .unwrap_or_else(|| Err("script exhausted".to_string()))
        }
    }

    #[test]
    fn score_parser_patterns() {
        assert_eq!(parse_judge_score("8"), Some(8.0));
        assert_eq!(parse_judge_score("score: 9/10"), Some(9.0));
        assert_eq!(parse_judge_score("I would give this a 7.5 overall."), Some(7.5));
        assert_eq!(parse_judge_score("ten out of ten"), None);
        // out-of-range numbers are skipped, in-range later ones accepted
        assert_eq!(parse_judge_score("in 2024 terms, a 6"), Some(6.0));
    }

    #[test]
    fn constant_judge_means_constant() {
        let judge = ScriptedJudge::new(vec![Ok("8".into()), Ok("8".into()), Ok("8".into())]);
        let outcome = judge_explanations(&judge, &["a".into(), "b".into(), "c".into()]).unwrap();
        assert_eq!(outcome.mean, Some(8.0));
        assert_eq!(outcome.scored, 3);
        assert_eq!(outcome.skipped, 0);
    }

    #[test]
    fn mixed_patterns_average() {
        let judge = ScriptedJudge::new(vec![Ok("score: 9/10".into()), Ok("7".into())]);
        let outcome = judge_explanations(&judge, &["a".into(), "b".into()]).unwrap();
        assert_eq!(outcome.mean, Some(8.0));
    }

    #[test]
    fn unparseable_reply_retries_once_then_skips() {
        let judge = ScriptedJudge::new(vec![
            Ok("no idea".into()),
            Ok("fine, 6".into()), // retry of item 0
            Ok("4".into()),
        ]);
        let outcome = judge_explanations(&judge, &["a".into(), "b".into()]).unwrap();
        assert_eq!(outcome.per_item, vec![Some(6.0), Some(4.0)]);
        assert_eq!(outcome.mean, Some(5.0));
    }

    #[test]
    fn all_unparseable_yields_zero_scored() {
        let judge = ScriptedJudge::new(vec![Ok("??".into()); 4]);
        let outcome = judge_explanations(&judge, &["a".into(), "b".into()]).unwrap();
        assert_eq!(outcome.scored, 0);
        assert_eq!(outcome.mean, None);
        assert_eq!(outcome.skipped, 2);
        assert!(!outcome.diagnostics.is_empty());
    }

    #[test]
    fn dead_backend_is_unavailable() {
        let judge = ScriptedJudge::new(vec![Err("down".into()); 4]);
        let err = judge_explanations(&judge, &["a".into(), "b".into()]).unwrap_err();
        assert!(matches!(err, EvalError::JudgeUnavailable));
    }

    #[test]
    fn empty_items_is_an_error() {
        let judge = ScriptedJudge::new(vec![]);
        assert!(matches!(judge_explanations(&judge, &[]), Err(EvalError::EmptyInput)));
    }
}
