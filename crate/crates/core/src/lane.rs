//! Interpreting locator responses and composing the final generation prompt.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::domain::{LaneDescription, OptimizedPrompt};

pub const DEFAULT_ABSENCE_PHRASES: [&str; 2] = ["no bike lane", "not present"];

/// Clause appended after the lane description for the second cascade step.
pub const HIGHLIGHT_STATEMENT: &str = "The highlighted regions represent bike lanes.";

pub const PROMPT_SEPARATOR: &str = "\n\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum ComposeError {
    #[error("lane description marks the lane absent; the scene is excluded")]
    LaneAbsent,
}

const POSITION_TERMS: &[&str] = &[
    "left boundary",
    "right boundary",
    "adjacent",
    "side of the road",
    "curb",
    "sidewalk",
    "between",
    "next to",
    "along",
    "parking",
];
const WIDTH_TERMS: &[&str] = &["wide", "width", "feet", " ft", "foot", "meter", "narrow"];
const PATTERN_TERMS: &[&str] = &[
    "stripe",
    "diagonal",
    "hatch",
    "pattern",
    "dashed",
    "bollard",
    "symbol",
    "glyph",
    "chevron",
    "armadillo",
];
const MARKING_TERMS: &[&str] = &["line", "paint", "marking", "green", "solid"];

fn split_sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let bytes = text.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        let end_of_sentence =
            matches!(b, b'.' | b'!' | b'?' | b'\n') && bytes.get(i + 1).is_none_or(|n| n.is_ascii_whitespace());
        if end_of_sentence {
            let s = text[start..=i].trim();
            if !s.is_empty() {
                out.push(s);
            }
            start = i + 1;
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

fn mentions(sentence_lower: &str, terms: &[&str]) -> bool {
    terms.iter().any(|t| sentence_lower.contains(t))
}

fn labeled(text: &str, labels: &[&str]) -> Option<String> {
    text.lines().find_map(|line| {
        let l = line.trim();
        let lower = l.to_lowercase();
        labels.iter().find_map(|label| {
            lower
                .strip_prefix(label)
                .and_then(|rest| rest.strip_prefix(':'))
                .map(|_| l[label.len() + 1..].trim().to_string())
        })
    })
}

/// Absence check against a configurable phrase list (case-insensitive).
pub fn describes_absence(text: &str, phrases: &[&str]) -> bool {
    let lower = text.to_lowercase();
    text.trim().is_empty() || phrases.iter().any(|p| lower.contains(&p.to_lowercase()))
}

/// Turns a prose locator response into a [`LaneDescription`].
///
/// Explicit `Markings:` / `Pattern:` / `Width:` / `Position:` lines win;
/// otherwise sentences are routed by keyword. The raw text is always kept
/// and `parse_warning` is set when nothing structured could be extracted.
pub fn parse_locator_response(text: &str, absence_phrases: &[&str]) -> LaneDescription {
    if describes_absence(text, absence_phrases) {
        return LaneDescription::absent(text);
    }
    let mut desc = LaneDescription {
        present: true,
        raw_text: text.to_string(),
        ..LaneDescription::default()
    };

    let explicit = [
        labeled(text, &["markings", "marking"]),
        labeled(text, &["pattern"]),
        labeled(text, &["width", "width estimate"]),
        labeled(text, &["position", "relative position", "location"]),
    ];
    if explicit.iter().any(Option::is_some) {
        let [m, p, w, r] = explicit;
        desc.markings = m.unwrap_or_default();
        desc.pattern = p.unwrap_or_default();
        desc.width_estimate = w.unwrap_or_default();
        desc.relative_position = r.unwrap_or_default();
        return desc;
    }

    let mut fields: [Vec<&str>; 4] = Default::default();
    for sentence in split_sentences(text) {
        let lower = sentence.to_lowercase();
        for (slot, terms) in [MARKING_TERMS, PATTERN_TERMS, WIDTH_TERMS, POSITION_TERMS]
            .into_iter()
            .enumerate()
        {
            if mentions(&lower, terms) {
                fields[slot].push(sentence);
            }
        }
    }
    let [m, p, w, r] = fields.map(|v| v.join(" "));
    desc.markings = m;
    desc.pattern = p;
    desc.width_estimate = w;
    desc.relative_position = r;
    desc.parse_warning = desc.structured_is_empty();
    desc
}

/// Optimized prompt, lane description and the highlight statement, in that order.
pub fn compose_generation_prompt(opt: &OptimizedPrompt, lane: &LaneDescription) -> Result<String, ComposeError> {
    if !lane.present {
        return Err(ComposeError::LaneAbsent);
    }
    Ok(format!(
        "{}{sep}{}{sep}{}",
        opt.text.trim(),
        lane.raw_text.trim(),
        HIGHLIGHT_STATEMENT,
        sep = PROMPT_SEPARATOR
    ))
}
