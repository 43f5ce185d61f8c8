//! Backend-ready prompt assembly: classification, comprehension, text-based
//! ICL, and the six QA-generation tasks.
//!
//! Template text lives under `resources/templates/v1/` so the byte-exact
//! prompts stay auditable.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{render_policy, Policy, PolicyError};

/// Fixed classification-mode question.
pub const CLASSIFICATION_TEMPLATE: &str = include_str!("../resources/templates/v1/classification.txt");
/// Comprehension-mode question appended to the rendered policy.
pub const COMPREHENSION_QUESTION: &str = include_str!("../resources/templates/v1/comprehension_question.txt");
/// ICL output-format block (three keys: IMAGE_CONTENT, MODERATION_REASON, MODERATION_RESULT).
pub const ICL_FORMAT_BLOCK: &str = include_str!("../resources/templates/v1/icl_format.txt");

const QA_TASKS: &str = include_str!("../resources/templates/v1/qa_tasks.txt");
const EXAMPLES_MARKER: &str = "<Here are some examples>";

/// Verbatim membership question used for consistency filtering votes.
pub const MEMBERSHIP_QUESTION: &str =
    "Does this image belong to the specified category based on the definitions?";

pub const DEFAULT_MAX_TOKENS_CLASSIFICATION: u32 = 24;
pub const DEFAULT_MAX_TOKENS_COMPREHENSION: u32 = 96;
pub const DEFAULT_MAX_TOKENS_ICL: u32 = 160;
pub const DEFAULT_ICL_EXAMPLES: usize = 4;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("ICL examples mix different format kinds")]
    MixedExampleFormats,
    #[error("requested {requested} examples but only {available} provided")]
    NotEnoughExamples { requested: usize, available: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Prompting mode a bundle was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Classification,
    Comprehension,
    Icl,
    Qa2,
    Qa3,
    Qa4,
    Qa5,
    Qa6,
    Qa7,
    /// Internal yes/no membership query used by consistency filtering.
    Membership,
}

impl Mode {
    /// Whether outputs in this mode carry a moderation reason.
    pub fn expects_reason(self) -> bool {
        matches!(self, Mode::Comprehension | Mode::Icl | Mode::Qa5 | Mode::Qa6)
    }
}

/// A fully assembled prompt plus its decode budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_text: Option<String>,
    pub user_text: String,
    pub mode: Mode,
    pub expects_reason: bool,
    pub max_output_tokens: u32,
}

impl PromptBundle {
    fn new(user_text: String, mode: Mode, max_output_tokens: u32) -> Self {
        debug_assert!(!user_text.is_empty());
        debug_assert!(max_output_tokens >= 8);
        Self {
            system_text: None,
            user_text,
            mode,
            expects_reason: mode.expects_reason(),
            max_output_tokens,
        }
    }
}

/// Format of a text-based ICL demonstration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IclFormatKind {
    NameOnly,
    NameWithExplanation,
    JsonBrief,
    JsonDetailed,
}

/// A text-only demonstration standing in for an image example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IclExample {
    pub image_description: String,
    pub correct_response: String,
    pub format_kind: IclFormatKind,
}

/// The fixed classification-mode prompt.
pub fn build_classification_prompt() -> PromptBundle {
    PromptBundle::new(
        CLASSIFICATION_TEMPLATE.to_string(),
        Mode::Classification,
        DEFAULT_MAX_TOKENS_CLASSIFICATION,
    )
}

/// Rendered policy followed by the comprehension question.
pub fn build_comprehension_prompt(policy: &Policy) -> PromptBundle {
    let user_text = format!("{}{}", render_policy(policy), COMPREHENSION_QUESTION);
    PromptBundle::new(user_text, Mode::Comprehension, DEFAULT_MAX_TOKENS_COMPREHENSION)
}

/// Policy, ICL output-format block, and the first `n` demonstrations in input
/// order. All demonstrations must share one format kind.
pub fn build_icl_prompt(
    policy: &Policy,
    examples: &[IclExample],
    n: usize,
) -> Result<PromptBundle, PromptError> {
    if n > examples.len() {
        return Err(PromptError::NotEnoughExamples { requested: n, available: examples.len() });
    }
    let chosen = &examples[..n];
    if let Some(first) = chosen.first() {
        if chosen.iter().any(|e| e.format_kind != first.format_kind) {
            return Err(PromptError::MixedExampleFormats);
        }
    }
    let mut user_text = render_policy(policy);
    user_text.push_str(ICL_FORMAT_BLOCK);
    if !chosen.is_empty() {
        user_text.push('\n');
        user_text.push_str(EXAMPLES_MARKER);
        user_text.push('\n');
        for (i, ex) in chosen.iter().enumerate() {
            user_text.push_str(&format!(
                "# EXAMPLE {} #\n<IMAGE>\n{}\n<Correct response>\n{}\n",
                i + 1,
                ex.image_description,
                ex.correct_response
            ));
        }
    }
    Ok(PromptBundle::new(user_text, Mode::Icl, DEFAULT_MAX_TOKENS_ICL))
}

/// The category-definition block plus the verbatim membership question.
pub fn build_membership_prompt(category: &crate::policy::CategoryDef) -> PromptBundle {
    let mut text = format!("**{}**\nCore Value: {}\n", category.id, category.core_value);
    for rule in &category.rules {
        text.push_str(&format!("- {rule}\n"));
    }
    text.push('\n');
    text.push_str(MEMBERSHIP_QUESTION);
    PromptBundle::new(text, Mode::Membership, DEFAULT_MAX_TOKENS_CLASSIFICATION)
}

fn qa_wording(tag: &str) -> &'static str {
    for line in QA_TASKS.lines() {
        if let Some(rest) = line.strip_prefix(tag) {
            if let Some(text) = rest.strip_prefix(": ") {
                return text;
            }
        }
    }
    panic!("qa_tasks.txt is missing wording for {tag}");
}

/// Builds the six retained QA-generation prompts for one labeled sample, in
/// order QA2..QA7. The content-summary-only task is never included.
///
/// QA2 asks for the category directly with no policy; QA3 is multiple choice
/// over the policy's categories; QA4 presents the policy with the correct
/// category's block removed (the expected answer is a refusal); QA5 is binary
/// safe/unsafe; QA6 asks why the image sits in its category; QA7 is the full
/// policy followed by result plus explanation.
pub fn build_qa_prompts(category_label: &str, policy: &Policy) -> Result<Vec<PromptBundle>, PromptError> {
    let category = policy
        .category(category_label)
        .ok_or_else(|| PolicyError::UnknownCategory(category_label.to_string()))?;

    let qa2 = PromptBundle::new(qa_wording("QA2").to_string(), Mode::Qa2, DEFAULT_MAX_TOKENS_CLASSIFICATION);

    let mut qa3_text = String::from(qa_wording("QA3"));
    qa3_text.push('\n');
    for (i, cat) in policy.categories.iter().enumerate() {
        qa3_text.push_str(&format!("{}. {}\n", (b'A' + i as u8) as char, cat.id));
    }
    let qa3 = PromptBundle::new(qa3_text, Mode::Qa3, DEFAULT_MAX_TOKENS_CLASSIFICATION);

    // QA4 renders the policy with the true category's explanation removed.
    let reduced = Policy {
        version: policy.version,
        provenance: policy.provenance.clone(),
        categories: policy
            .categories
            .iter()
            .filter(|c| c.id != category.id)
            .cloned()
            .collect(),
    };
    let qa4_text = format!("{}{}", render_policy(&reduced), qa_wording("QA4"));
    let qa4 = PromptBundle::new(qa4_text, Mode::Qa4, DEFAULT_MAX_TOKENS_COMPREHENSION);

    let qa5 = PromptBundle::new(qa_wording("QA5").to_string(), Mode::Qa5, DEFAULT_MAX_TOKENS_COMPREHENSION);

    let qa6_text = qa_wording("QA6").replace("{category}", &category.id);
    let qa6 = PromptBundle::new(qa6_text, Mode::Qa6, DEFAULT_MAX_TOKENS_COMPREHENSION);

    let qa7_text = format!("{}{}", render_policy(policy), qa_wording("QA7"));
    let qa7 = PromptBundle::new(qa7_text, Mode::Qa7, DEFAULT_MAX_TOKENS_ICL);

    Ok(vec![qa2, qa3, qa4, qa5, qa6, qa7])
}
