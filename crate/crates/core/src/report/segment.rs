//! Sentence segmentation for clinical report text.
//!
//! Splits on `.`/`;` and paragraph breaks, guarding common abbreviations
//! ("Dr.", "e.g."), "No." followed by a number, and decimal numbers
//! ("3.5 cm"). Spans keep their byte offsets into the original report so
//! downstream output can point back at the exact source text.

use serde::{Deserialize, Serialize};

use crate::error::{Result, UqError};

/// One sentence with byte offsets into the original report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceSpan {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDecomposition {
    pub report_id: String,
    pub sentences: Vec<SentenceSpan>,
}

/// Abbreviations whose trailing dot never ends a sentence.
const GUARDED_ABBREVIATIONS: &[&str] = &[
    "dr", "mr", "mrs", "ms", "prof", "st", "e.g", "i.e", "eg", "ie", "vs", "cf", "fig",
];

pub fn decompose(report_id: &str, report: &str) -> Result<ReportDecomposition> {
    Ok(ReportDecomposition {
        report_id: report_id.to_string(),
        sentences: segment_report(report)?,
    })
}

/// Split a report into sentence spans.
pub fn segment_report(report: &str) -> Result<Vec<SentenceSpan>> {
    if report.trim().is_empty() {
        return Err(UqError::EmptyReport);
    }
    let bytes = report.as_bytes();
    let chars: Vec<(usize, char)> = report.char_indices().collect();
    let mut boundaries: Vec<usize> = Vec::new(); // byte offset *after* the terminator

    for (ci, &(bi, ch)) in chars.iter().enumerate() {
        match ch {
            ';' => boundaries.push(bi + 1),
            '.' => {
                if is_decimal_dot(bytes, bi)
                    || is_guarded_abbreviation(report, &chars, ci)
                    || is_numbered_no(report, &chars, ci)
                {
                    continue;
                }
                boundaries.push(bi + 1);
            }
            '\n' => {
                // paragraph break: newline followed by (blank) newline
                let mut j = ci + 1;
                while j < chars.len() && chars[j].1 != '\n' && chars[j].1.is_whitespace() {
                    j += 1;
                }
                if j < chars.len() && chars[j].1 == '\n' {
                    boundaries.push(bi);
                }
            }
            _ => {}
        }
    }
    boundaries.push(report.len());

    let mut sentences = Vec::new();
    let mut start = 0usize;
    for &end in &boundaries {
        if end <= start {
            continue;
        }
        let raw = &report[start..end];
        if let Some(span) = trim_span(raw, start) {
            sentences.push(span);
        }
        start = end;
    }
    if sentences.is_empty() {
        return Err(UqError::EmptyReport);
    }
    Ok(sentences)
}

/// Trim whitespace but keep byte offsets pointing into the original text.
/// Spans without any alphanumeric content are dropped (stray punctuation
/// between sentences, double terminators).
fn trim_span(raw: &str, base: usize) -> Option<SentenceSpan> {
    let trimmed_start = raw.len() - raw.trim_start().len();
    let trimmed = raw.trim();
    if trimmed.is_empty() || !trimmed.chars().any(|c| c.is_alphanumeric()) {
        return None;
    }
    Some(SentenceSpan {
        text: trimmed.to_string(),
        start: base + trimmed_start,
        end: base + trimmed_start + trimmed.len(),
    })
}

/// Dot directly between two digits: "3.5".
fn is_decimal_dot(bytes: &[u8], bi: usize) -> bool {
    bi > 0
        && bi + 1 < bytes.len()
        && bytes[bi - 1].is_ascii_digit()
        && bytes[bi + 1].is_ascii_digit()
}

/// Word ending at this dot is a guarded abbreviation or a single-letter
/// initial ("Dr. A. Smith", the internal dots of "e.g.").
fn is_guarded_abbreviation(report: &str, chars: &[(usize, char)], ci: usize) -> bool {
    let word = word_before(report, chars, ci);
    if word.is_empty() {
        return false;
    }
    if word.chars().count() == 1 && word.chars().all(|c| c.is_alphabetic()) {
        return true;
    }
    GUARDED_ABBREVIATIONS.contains(&word.to_lowercase().as_str())
}

/// "No." immediately followed by a number ("rib fracture at No. 3").
fn is_numbered_no(report: &str, chars: &[(usize, char)], ci: usize) -> bool {
    if !word_before(report, chars, ci).eq_ignore_ascii_case("no") {
        return false;
    }
    chars[ci + 1..]
        .iter()
        .map(|&(_, c)| c)
        .find(|c| !c.is_whitespace())
        .is_some_and(|c| c.is_ascii_digit())
}

/// The token (letters and internal dots) immediately preceding `chars[ci]`.
fn word_before<'a>(report: &'a str, chars: &[(usize, char)], ci: usize) -> &'a str {
    let end = chars[ci].0;
    let mut start_idx = ci;
    while start_idx > 0 {
        let prev = chars[start_idx - 1].1;
        if prev.is_alphabetic() || prev == '.' {
            start_idx -= 1;
        } else {
            break;
        }
    }
    report[chars[start_idx].0..end].trim_matches('.')
}
