//! Parsing and encoding of the moderation output protocol.
//!
//! Backends emit single-quoted pseudo-JSON answer templates as well as strict
//! JSON; parsing is lenient (quote normalization, trailing commas, padded
//! keys) while canonical service emission stays strict. Keyword matching is
//! the fallback for free-text replies.

use std::collections::BTreeMap;

use regex::Regex;
use serde_json::Value;
use thiserror::Error;

use crate::policy::{Policy, IMAGE_CONTENT_KEY, REASON_KEY, RESULT_KEY};
use crate::prompt::Mode;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
}

/// How a moderation result was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ResultSource {
    StructuredParse,
    KeywordFallback,
}

/// A parsed moderation verdict. Only true-valued flags are retained; an empty
/// flag map is the safe verdict.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModerationResult {
    pub flags: BTreeMap<String, bool>,
    pub reason: Option<String>,
    pub image_content: Option<String>,
    pub source: ResultSource,
}

impl ModerationResult {
    pub fn safe(source: ResultSource) -> Self {
        Self { flags: BTreeMap::new(), reason: None, image_content: None, source }
    }

    pub fn is_safe(&self, policy: &Policy) -> bool {
        self.flags.is_empty()
            || self
                .flags
                .keys()
                .all(|id| policy.category(id).map(|c| c.is_safe_class).unwrap_or(false))
    }

    /// Normalized label set: flagged ids, or the safe class when no flag is set.
    pub fn labels(&self, policy: &Policy) -> std::collections::BTreeSet<String> {
        if self.flags.is_empty() {
            policy.safe_class().map(|c| c.id.clone()).into_iter().collect()
        } else {
            self.flags.keys().cloned().collect()
        }
    }

    /// First true flag in policy order, for single-label consumers.
    pub fn primary_label<'p>(&self, policy: &'p Policy) -> Option<&'p str> {
        policy
            .categories
            .iter()
            .find(|c| self.flags.contains_key(&c.id))
            .map(|c| c.id.as_str())
            .or_else(|| policy.safe_class().map(|c| c.id.as_str()))
    }

    /// Strict-JSON canonical serialization (keys MODERATION_RESULT,
    /// MODERATION_REASON, IMAGE_CONTENT).
    pub fn to_strict_json(&self, policy: &Policy) -> String {
        let mut result = serde_json::Map::new();
        for cat in &policy.categories {
            if self.flags.contains_key(&cat.id) {
                result.insert(cat.display_token.clone(), Value::Bool(true));
            }
        }
        let mut doc = serde_json::Map::new();
        doc.insert(RESULT_KEY.to_string(), Value::Object(result));
        if let Some(reason) = &self.reason {
            doc.insert(REASON_KEY.to_string(), Value::String(reason.clone()));
        }
        if let Some(content) = &self.image_content {
            doc.insert(IMAGE_CONTENT_KEY.to_string(), Value::String(content.clone()));
        }
        Value::Object(doc).to_string()
    }
}

/// Outcome of a structured parse attempt. `ok` implies `result` is present.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ParseReport {
    pub ok: bool,
    pub result: Option<ModerationResult>,
    pub diagnostics: Vec<String>,
}

impl ParseReport {
    fn failure(diagnostics: Vec<String>) -> Self {
        Self { ok: false, result: None, diagnostics }
    }
}

/// Parses a backend moderation output against the active policy.
///
/// Accepts strict JSON and single-quoted pseudo-JSON; recognizes category
/// keys as display tokens, bare ids, or `O3(Name)`-style keys. False-valued
/// entries are dropped; unknown keys fail validation with a diagnostic.
pub fn parse_moderation_output(raw: &str, policy: &Policy, mode: Mode) -> ParseReport {
    let mut diagnostics = Vec::new();
    let value = match parse_lenient_json(raw, &mut diagnostics) {
        Some(v) => v,
        None => {
            diagnostics.push("output is not parseable as JSON or pseudo-JSON".to_string());
            return ParseReport::failure(diagnostics);
        }
    };
    let obj = match value.as_object() {
        Some(o) => o,
        None => {
            diagnostics.push("top-level value is not an object".to_string());
            return ParseReport::failure(diagnostics);
        }
    };
    let result_obj = match lookup_trimmed(obj, RESULT_KEY) {
        Some(Value::Object(m)) => m.clone(),
        Some(_) => {
            diagnostics.push(format!("{RESULT_KEY} is not an object"));
            return ParseReport::failure(diagnostics);
        }
        None => {
            diagnostics.push(format!("missing {RESULT_KEY} key"));
            return ParseReport::failure(diagnostics);
        }
    };

    let mut flags = BTreeMap::new();
    for (key, val) in &result_obj {
        let flag = match val {
            Value::Bool(b) => *b,
            other => {
                diagnostics.push(format!("non-boolean value for key {key:?}: {other}"));
                return ParseReport::failure(diagnostics);
            }
        };
        let Some(id) = resolve_category_key(key, policy) else {
            diagnostics.push(format!("unknown category key {key:?}"));
            return ParseReport::failure(diagnostics);
        };
        if flag {
            flags.insert(id, true);
        }
    }

    let reason = lookup_trimmed(obj, REASON_KEY)
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty() && *s != "None")
        .map(ToString::to_string);
    let image_content = lookup_trimmed(obj, IMAGE_CONTENT_KEY)
        .and_then(Value::as_str)
        .map(str::trim)
        .filter(|s| !s.is_empty() && *s != "None")
        .map(ToString::to_string);

    if mode.expects_reason() && reason.is_none() && !flags.is_empty() {
        diagnostics.push("mode expects a moderation reason but none was found".to_string());
    }

    ParseReport {
        ok: true,
        result: Some(ModerationResult {
            flags,
            reason,
            image_content,
            source: ResultSource::StructuredParse,
        }),
        diagnostics,
    }
}

fn lookup_trimmed<'a>(obj: &'a serde_json::Map<String, Value>, key: &str) -> Option<&'a Value> {
    obj.get(key)
        .or_else(|| obj.iter().find(|(k, _)| k.trim() == key).map(|(_, v)| v))
}

fn parse_lenient_json(raw: &str, diagnostics: &mut Vec<String>) -> Option<Value> {
    let raw = raw.trim();
    if let Ok(v) = serde_json::from_str::<Value>(raw) {
        return Some(v);
    }
    // Answer templates use single quotes and allow trailing commas.
    let normalized = normalize_pseudo_json(raw);
    match serde_json::from_str::<Value>(&normalized) {
        Ok(v) => {
            diagnostics.push("parsed via pseudo-JSON normalization".to_string());
            Some(v)
        }
        Err(_) => None,
    }
}

fn normalize_pseudo_json(raw: &str) -> String {
    let quoted = raw.replace('\'', "\"");
    let trailing = Regex::new(r",\s*([}\]])").unwrap();
    trailing.replace_all(&quoted, "$1").into_owned()
}

/// Maps a raw result key ("<|Sexual|>", "Sexual", or "O3(WomanBreast)") to a
/// policy category id.
fn resolve_category_key(key: &str, policy: &Policy) -> Option<String> {
    let key = key.trim();
    let bare = key
        .strip_prefix("<|")
        .and_then(|k| k.strip_suffix("|>"))
        .map(str::to_string)
        .or_else(|| {
            let icl = Regex::new(r"^O\d+\(([A-Za-z0-9_]+)\)$").unwrap();
            icl.captures(key).map(|c| c[1].to_string())
        })
        .unwrap_or_else(|| key.to_string());
    policy.category(&bare).map(|c| c.id.clone())
}

/// Case-insensitive whole-word scan for category names. Longest name wins on
/// overlap so "Self Harm" is never shadowed by "Harm". No hit is the safe
/// verdict.
pub fn keyword_fallback(raw: &str, policy: &Policy) -> ModerationResult {
    // (name, category id), longest names first
    let mut names: Vec<(String, &str)> = Vec::new();
    for cat in &policy.categories {
        names.push((cat.id.clone(), cat.id.as_str()));
        let spaced = cat.id.replace('_', " ");
        if spaced != cat.id {
            names.push((spaced, cat.id.as_str()));
        }
    }
    names.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then(a.0.cmp(&b.0)));

    let mut taken: Vec<(usize, usize)> = Vec::new();
    let mut flags = BTreeMap::new();
    for (name, id) in &names {
        let pattern = format!(r"(?i)\b{}\b", regex::escape(name));
        let re = Regex::new(&pattern).unwrap();
        for m in re.find_iter(raw) {
            let span = (m.start(), m.end());
            if taken.iter().any(|t| span.0 < t.1 && t.0 < span.1) {
                continue;
            }
            taken.push(span);
            flags.insert((*id).to_string(), true);
        }
    }
    // A lone safe-class hit is just the safe verdict.
    if let Some(safe) = policy.safe_class() {
        if flags.len() == 1 && flags.contains_key(&safe.id) {
            flags.clear();
        }
    }
    ModerationResult { flags, reason: None, image_content: None, source: ResultSource::KeywordFallback }
}

/// Emits the canonical ground-truth answer for a label set in the
/// single-quoted template shape. The safe class encodes as the empty result object, and
/// `parse_moderation_output` of the emission reproduces the input labels.
pub fn encode_expected_answer(
    labels: &[&str],
    reason: Option<&str>,
    mode: Mode,
    policy: &Policy,
) -> Result<String, CodecError> {
    for label in labels {
        if policy.category(label).is_none() {
            return Err(CodecError::UnknownCategory(label.to_string()));
        }
    }
    // policy order, safe class dropped (safe is the empty verdict)
    let entries: Vec<String> = policy
        .categories
        .iter()
        .filter(|c| !c.is_safe_class && labels.contains(&c.id.as_str()))
        .map(|c| format!("'{}': true", c.display_token))
        .collect();
    let result = format!("{{{}}}", entries.join(", "));
    if mode.expects_reason() || matches!(mode, Mode::Qa7) {
        let reason = reason
            .map(|r| r.replace('\'', "\u{2019}"))
            .unwrap_or_else(|| "None".to_string());
        Ok(format!("{{'{RESULT_KEY}': {result}, '{REASON_KEY}': '{reason}'}}"))
    } else {
        Ok(format!("{{'{RESULT_KEY}': {result}}}"))
    }
}

/// Refusal emitted when the true category is absent from the policy (QA4).
pub const REFUSAL_ANSWER: &str =
    "I cannot classify this image: its category is not defined in the provided policy.";

/// Templated moderation reason used when no analyzer-generated reason exists.
pub fn templated_reason(label: &str, policy: &Policy) -> String {
    match policy.category(label) {
        Some(cat) if !cat.is_safe_class => {
            format!("The image matches the {} category: {}", cat.id, cat.core_value)
        }
        _ => "None".to_string(),
    }
}

/// Canonical answer for one QA task over a labeled sample.
pub fn qa_expected_answer(
    mode: Mode,
    label: &str,
    policy: &Policy,
    reason: Option<&str>,
) -> Result<String, CodecError> {
    let cat = policy
        .category(label)
        .ok_or_else(|| CodecError::UnknownCategory(label.to_string()))?;
    let is_safe = cat.is_safe_class;
    let reason_text = reason.map(ToString::to_string).unwrap_or_else(|| templated_reason(label, policy));
    Ok(match mode {
        Mode::Qa2 | Mode::Qa3 => cat.id.clone(),
        Mode::Qa4 => REFUSAL_ANSWER.to_string(),
        Mode::Qa5 => {
            if is_safe {
                "No, the image does not contain unsafe content.".to_string()
            } else {
                format!("Yes, the image contains unsafe content. {reason_text}")
            }
        }
        Mode::Qa6 => {
            if is_safe {
                format!("The image is safe: {}", cat.core_value)
            } else {
                reason_text
            }
        }
        Mode::Qa7 | Mode::Comprehension | Mode::Icl => {
            encode_expected_answer(&[label], Some(&reason_text), Mode::Comprehension, policy)?
        }
        Mode::Classification | Mode::Membership => {
            encode_expected_answer(&[label], None, Mode::Classification, policy)?
        }
    })
}
