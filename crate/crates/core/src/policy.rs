//! Guardrail policy parsing, rendering, versioning, and the special-token
//! vocabulary derived from category names.
//!
//! A policy is an ordered list of categories, each with a one-sentence core
//! value and bullet rules. Policies are parsed from free-form text either by a
//! deterministic grammar or by prompting an analyzer backend whose output is
//! validated against the same grammar.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Key token that opens the result object in canonical outputs.
pub const RESULT_KEY: &str = "MODERATION_RESULT";
/// Key token for the moderation reason in comprehension outputs.
pub const REASON_KEY: &str = "MODERATION_REASON";
/// Key token for the image-content summary in ICL outputs.
pub const IMAGE_CONTENT_KEY: &str = "IMAGE_CONTENT";

const CATEGORIES_MARKER: &str = "<HARMFUL CATEGORIES>";
const EXPLANATIONS_MARKER: &str = "<HARMFUL CATEGORIES EXPLANATIONS>";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("no category blocks found in policy text")]
    MalformedPolicyText,
    #[error("analyzer output failed structural validation: {0}")]
    BackendParseMismatch(String),
    #[error("duplicate category id {0:?}")]
    DuplicateCategoryId(String),
    #[error("the safe class may be edited but never removed")]
    RemovingSafeClass,
    #[error("unknown category id {0:?}")]
    UnknownCategory(String),
    #[error("invalid category id {0:?}: only [A-Za-z0-9_] allowed")]
    InvalidCategoryId(String),
    #[error("policy declares more than one safe class")]
    MultipleSafeClasses,
}

/// Text-completion surface used by the analyzer-backed parse path.
pub trait TextBackend {
    fn complete(&self, prompt: &str) -> Result<String, String>;
}

/// One guardrail category: machine id, category token, core value, and rules.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryDef {
    pub id: String,
    #[serde(default)]
    pub display_token: String,
    pub core_value: String,
    pub rules: Vec<String>,
    pub is_safe_class: bool,
}

impl CategoryDef {
    pub fn new(
        id: impl Into<String>,
        core_value: impl Into<String>,
        rules: Vec<String>,
        is_safe_class: bool,
    ) -> Self {
        let id = id.into();
        let display_token = display_token_for(&id);
        Self { id, display_token, core_value: core_value.into(), rules, is_safe_class }
    }
}

/// The "<|Name|>" token form of a category id.
pub fn display_token_for(id: &str) -> String {
    format!("<|{id}|>")
}

/// A versioned guardrail policy. Immutable once built; updates produce a new
/// value with the version bumped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Policy {
    pub version: u32,
    pub provenance: String,
    pub categories: Vec<CategoryDef>,
}

impl Policy {
    pub fn new(categories: Vec<CategoryDef>, provenance: impl Into<String>) -> Result<Self, PolicyError> {
        let policy = Self { version: 0, provenance: provenance.into(), categories };
        policy.validate()?;
        Ok(policy)
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.categories.is_empty() {
            return Err(PolicyError::MalformedPolicyText);
        }
        let mut seen = std::collections::HashSet::new();
        let mut safe_count = 0;
        for cat in &self.categories {
            if !is_valid_id(&cat.id) {
                return Err(PolicyError::InvalidCategoryId(cat.id.clone()));
            }
            if !seen.insert(cat.id.clone()) {
                return Err(PolicyError::DuplicateCategoryId(cat.id.clone()));
            }
            if cat.is_safe_class {
                safe_count += 1;
            }
        }
        if safe_count > 1 {
            return Err(PolicyError::MultipleSafeClasses);
        }
        Ok(())
    }

    pub fn category(&self, id: &str) -> Option<&CategoryDef> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn safe_class(&self) -> Option<&CategoryDef> {
        self.categories.iter().find(|c| c.is_safe_class)
    }

    pub fn category_ids(&self) -> Vec<&str> {
        self.categories.iter().map(|c| c.id.as_str()).collect()
    }
}

/// One entry of a policy update: add or edit a category, or remove one.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum UpdateOp {
    Add(CategoryDef),
    Edit(CategoryDef),
    Remove(String),
}

/// A proposed policy change with its provenance note.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicyUpdate {
    pub ops: Vec<UpdateOp>,
    pub source: String,
}

/// Applies an update, returning a new policy with the version incremented.
/// Untouched categories are carried over unchanged.
pub fn apply_policy_update(policy: &Policy, update: &PolicyUpdate) -> Result<Policy, PolicyError> {
    let mut categories = policy.categories.clone();
    for op in &update.ops {
        match op {
            UpdateOp::Add(cat) => {
                if categories.iter().any(|c| c.id == cat.id) {
                    return Err(PolicyError::DuplicateCategoryId(cat.id.clone()));
                }
                if !is_valid_id(&cat.id) {
                    return Err(PolicyError::InvalidCategoryId(cat.id.clone()));
                }
                categories.push(cat.clone());
            }
            UpdateOp::Edit(cat) => {
                let slot = categories
                    .iter_mut()
                    .find(|c| c.id == cat.id)
                    .ok_or_else(|| PolicyError::UnknownCategory(cat.id.clone()))?;
                *slot = cat.clone();
            }
            UpdateOp::Remove(id) => {
                let idx = categories
                    .iter()
                    .position(|c| c.id == *id)
                    .ok_or_else(|| PolicyError::UnknownCategory(id.clone()))?;
                if categories[idx].is_safe_class {
                    return Err(PolicyError::RemovingSafeClass);
                }
                categories.remove(idx);
            }
        }
    }
    let updated = Policy {
        version: policy.version + 1,
        provenance: update.source.clone(),
        categories,
    };
    updated.validate()?;
    Ok(updated)
}

fn is_valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Derives a machine id from a free-form category name: non-alphanumeric runs
/// collapse to a single underscore.
pub fn id_from_name(name: &str) -> String {
    let mut out = String::new();
    let mut pending_sep = false;
    for c in name.trim().chars() {
        if c.is_ascii_alphanumeric() {
            if pending_sep && !out.is_empty() {
                out.push('_');
            }
            pending_sep = false;
            out.push(c);
        } else {
            pending_sep = true;
        }
    }
    out
}

fn is_safe_name(id: &str) -> bool {
    id.eq_ignore_ascii_case("safe") || id.eq_ignore_ascii_case("normal")
}

/// Parses free-form category descriptions into a version-0 policy.
///
/// With no backend, the grammar path applies directly: category blocks open
/// with a bold header line (or a bare name line immediately followed by a
/// `Core Value:` line), `Core Value:` carries the core value, and `-` lines
/// become rules. With a backend, the backend is asked to emit the same block
/// structure and the grammar path validates the result.
pub fn parse_policy(raw_text: &str, backend: Option<&dyn TextBackend>) -> Result<Policy, PolicyError> {
    if raw_text.trim().is_empty() {
        return Err(PolicyError::MalformedPolicyText);
    }
    match backend {
        None => parse_grammar(raw_text),
        Some(b) => {
            let prompt = format!(
                "Rewrite the following category descriptions as guardrail policy blocks. \
                 For each category emit a header line **Name**, then a line starting with \
                 'Core Value:' holding a one-sentence core value, then one '-' bullet line \
                 per rule. Emit nothing else.\n\n{raw_text}"
            );
            let reply = b
                .complete(&prompt)
                .map_err(PolicyError::BackendParseMismatch)?;
            parse_grammar(&reply).map_err(|e| PolicyError::BackendParseMismatch(e.to_string()))
        }
    }
}

fn parse_grammar(raw_text: &str) -> Result<Policy, PolicyError> {
    let lines: Vec<&str> = raw_text.lines().collect();
    let mut categories: Vec<CategoryDef> = Vec::new();
    let mut current: Option<(String, String, Vec<String>)> = None; // (id, core, rules)

    let flush = |cur: &mut Option<(String, String, Vec<String>)>, cats: &mut Vec<CategoryDef>| {
        if let Some((id, core, rules)) = cur.take() {
            let safe = is_safe_name(&id);
            cats.push(CategoryDef::new(id, core.trim().to_string(), rules, safe));
        }
    };

    let mut i = 0;
    while i < lines.len() {
        let line = lines[i].trim();
        i += 1;
        if line.is_empty() || is_skippable(line) {
            continue;
        }
        if let Some(name) = header_name(line) {
            flush(&mut current, &mut categories);
            let id = id_from_name(&name);
            if id.is_empty() {
                return Err(PolicyError::MalformedPolicyText);
            }
            current = Some((id, String::new(), Vec::new()));
            continue;
        }
        if let Some(rest) = strip_core_value(line) {
            match &mut current {
                Some((_, core, _)) => {
                    core.push_str(rest.trim());
                }
                None => return Err(PolicyError::MalformedPolicyText),
            }
            continue;
        }
        // Bare name line: header iff the next meaningful line is a core value.
        if current.is_none() || looks_like_bare_header(line, &lines[i..]) {
            if looks_like_bare_header(line, &lines[i..]) {
                flush(&mut current, &mut categories);
                let id = id_from_name(line.trim_end_matches([',', '\\']));
                if id.is_empty() {
                    return Err(PolicyError::MalformedPolicyText);
                }
                current = Some((id, String::new(), Vec::new()));
            }
            continue;
        }
        let (_, core, rules) = current.as_mut().expect("current block");
        if let Some(rule) = line.strip_prefix('-') {
            rules.push(rule.trim().to_string());
        } else if rules.is_empty() && !core.is_empty() {
            // continuation of the core value sentence
            core.push(' ');
            core.push_str(line);
        } else if let Some(last) = rules.last_mut() {
            last.push(' ');
            last.push_str(line);
        }
    }
    flush(&mut current, &mut categories);

    if categories.is_empty() {
        return Err(PolicyError::MalformedPolicyText);
    }
    let policy = Policy {
        version: 0,
        provenance: "parsed from raw category text".to_string(),
        categories,
    };
    policy.validate()?;
    Ok(policy)
}

fn is_skippable(line: &str) -> bool {
    line == CATEGORIES_MARKER
        || line == EXPLANATIONS_MARKER
        || line.starts_with('#')
        || line.starts_with("Refer to the detailed explanations")
        || line.starts_with("This class includes")
        || line.starts_with("This class contains")
}

fn header_name(line: &str) -> Option<String> {
    let line = line.trim_end_matches([',', ' ', '\\']);
    let inner = line.strip_prefix("**")?.strip_suffix("**")?;
    if inner.is_empty() {
        None
    } else {
        Some(inner.trim().to_string())
    }
}

fn looks_like_bare_header(line: &str, rest: &[&str]) -> bool {
    if line.starts_with('-') || line.contains(':') || line.contains(',') {
        return false;
    }
    for next in rest {
        let next = next.trim();
        if next.is_empty() || next == EXPLANATIONS_MARKER || next == CATEGORIES_MARKER {
            continue;
        }
        return strip_core_value(next).is_some();
    }
    false
}

fn strip_core_value(line: &str) -> Option<&str> {
    line.strip_prefix("Core Value:").or_else(|| line.strip_prefix("Core value:"))
}

/// Renders the comprehension-mode policy block. Deterministic: equal policies
/// render byte-identically, and the grammar path parses the rendering back to
/// an equal category list.
pub fn render_policy(policy: &Policy) -> String {
    let mut out = String::new();
    out.push_str(CATEGORIES_MARKER);
    out.push('\n');
    out.push_str(&policy.category_ids().join(", "));
    out.push('\n');
    out.push_str(CATEGORIES_MARKER);
    out.push('\n');
    out.push_str("# Harmful Categories Explanations\n");
    out.push_str("Refer to the detailed explanations of each category below:\n");
    out.push_str(EXPLANATIONS_MARKER);
    out.push('\n');
    for cat in &policy.categories {
        out.push_str(&format!("**{}**\n", cat.id));
        out.push_str(&format!("Core Value: {}\n", cat.core_value));
        if !cat.rules.is_empty() {
            out.push_str("This class includes but is not limited to:\n");
            for rule in &cat.rules {
                out.push_str(&format!("- {rule}\n"));
            }
        }
        out.push('\n');
    }
    out.push_str(EXPLANATIONS_MARKER);
    out.push('\n');
    out
}

/// Token vocabulary for category and structural tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokenVocab {
    pub entries: BTreeMap<String, u32>,
    pub structural_tokens: Vec<(String, u32)>,
}

impl SpecialTokenVocab {
    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.entries
            .get(token)
            .copied()
            .or_else(|| self.structural_tokens.iter().find(|(t, _)| t == token).map(|(_, id)| *id))
    }

    pub fn token_for_id(&self, id: u32) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, v)| **v == id)
            .map(|(k, _)| k.as_str())
            .or_else(|| {
                self.structural_tokens
                    .iter()
                    .find(|(_, v)| *v == id)
                    .map(|(t, _)| t.as_str())
            })
    }

    /// All token ids in the vocabulary, category tokens first.
    pub fn all_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.entries.values().copied().collect();
        ids.sort_unstable();
        ids.extend(self.structural_tokens.iter().map(|(_, id)| *id));
        ids
    }
}

/// Assigns consecutive token ids starting at `base_id`: category tokens in
/// policy order, then the structural key tokens.
pub fn build_token_vocab(policy: &Policy, base_id: u32) -> SpecialTokenVocab {
    let mut entries = BTreeMap::new();
    let mut next = base_id;
    for cat in &policy.categories {
        entries.insert(cat.display_token.clone(), next);
        next += 1;
    }
    let mut structural_tokens = Vec::new();
    for tok in [RESULT_KEY, REASON_KEY, IMAGE_CONTENT_KEY] {
        structural_tokens.push((tok.to_string(), next));
        next += 1;
    }
    SpecialTokenVocab { entries, structural_tokens }
}


/// Fixtures shared across module tests and integration suites.
pub mod test_fixtures {
    use super::{CategoryDef, Policy};

    /// The ten-category policy layout used throughout the pipeline tests.
    pub fn ten_cat_policy() -> Policy {
        let ids = [
            "Safe",
            "Hate",
            "Violence",
            "Sexual",
            "Crime",
            "Weapons_Substance_Abuse",
            "Self_Harm",
            "Animal_Cruelty",
            "Disasters_Emergencies",
            "Political",
        ];
        let categories = ids
            .iter()
            .map(|id| {
                CategoryDef::new(
                    *id,
                    format!("All the images related to {}.", id.replace('_', " ").to_lowercase()),
                    vec![format!("images depicting {}", id.replace('_', " ").to_lowercase())],
                    *id == "Safe",
                )
            })
            .collect();
        Policy::new(categories, "fixture").unwrap()
    }
}
