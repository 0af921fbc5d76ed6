//! Text normalization shared by the judges, the duplicate-merge rule, and
//! the binary answer parser.

use serde::{Deserialize, Serialize};

/// Canonical form used for duplicate merging and exact-match judging:
/// lowercase, punctuation stripped, whitespace collapsed to single spaces.
pub fn normalize_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut last_space = true;
    for ch in s.chars() {
        if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                out.push(lc);
            }
            last_space = false;
        } else if (ch.is_whitespace() || ch.is_ascii_punctuation()) && !last_space {
            out.push(' ');
            last_space = true;
        }
        // other symbols dropped
    }
    while out.ends_with(' ') {
        out.pop();
    }
    out
}

/// Rule-based label for a sampled answer to a binary probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerLabel {
    Yes,
    No,
    Unknown,
}

impl AnswerLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            AnswerLabel::Yes => "yes",
            AnswerLabel::No => "no",
            AnswerLabel::Unknown => "unknown",
        }
    }
}

impl std::fmt::Display for AnswerLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

const YES_LEXICON: &[&str] = &["yes", "yeah", "correct", "true", "present"];
const NO_LEXICON: &[&str] = &["no", "not", "absent", "false", "negative"];
const NO_PHRASES: &[&str] = &["there is no", "there are no", "no evidence of"];
const YES_PHRASES: &[&str] = &["there is a", "there are"];

/// Map free-form answer text onto {yes, no, unknown}.
///
/// Leading-token lexicon match first, then phrase containment as a
/// fallback; negative phrases are checked before affirmative ones so
/// "there is no mass" parses as no.
pub fn normalize_answer(text: &str) -> AnswerLabel {
    let norm = normalize_text(text);
    if norm.is_empty() {
        return AnswerLabel::Unknown;
    }
    let first = norm.split(' ').next().unwrap_or("");
    if YES_LEXICON.contains(&first) {
        return AnswerLabel::Yes;
    }
    if NO_LEXICON.contains(&first) {
        return AnswerLabel::No;
    }
    for phrase in NO_PHRASES {
        if norm.contains(phrase) {
            return AnswerLabel::No;
        }
    }
    for phrase in YES_PHRASES {
        if norm.contains(phrase) {
            return AnswerLabel::Yes;
        }
    }
    AnswerLabel::Unknown
}
