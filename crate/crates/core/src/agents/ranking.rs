//! Parsing victim ranking outputs.
//!
//! Victims are asked for a numbered list of all candidate titles. Models
//! decorate ("1. \"Title\" (Deluxe)"), re-case, and sometimes prepend
//! reasoning, so matching runs in two steps per line: normalised exact match
//! first, then highest-token-coverage fuzzy match above a threshold. The
//! parse only succeeds when the lines and the candidates form a bijection —
//! a missing or doubled title is a parse failure, never a guess.

use regex::Regex;
use std::sync::OnceLock;

use super::VictimError;
use crate::textutil;

/// A successfully parsed ranking: `order[r]` is the candidate index at rank
/// `r + 1`.
#[derive(Debug, Clone)]
pub struct RankedList {
    pub order: Vec<usize>,
    pub raw: String,
}

impl RankedList {
    /// 1-based rank of a candidate index.
    pub fn rank_of_index(&self, candidate: usize) -> Option<u32> {
        self.order.iter().position(|&i| i == candidate).map(|p| p as u32 + 1)
    }

    /// 1-based rank of a title (normalised comparison).
    pub fn rank_of_title(&self, candidates: &[String], title: &str) -> Option<u32> {
        let wanted = textutil::normalize(title);
        candidates
            .iter()
            .position(|t| textutil::normalize(t) == wanted)
            .and_then(|idx| self.rank_of_index(idx))
    }
}

fn numbered_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^\s*(\d{1,3})[.)]\s*(.*\S)\s*$").expect("valid regex"))
}

/// Strips list decoration a model may wrap around a title.
fn strip_decoration(text: &str) -> &str {
    let mut t = text.trim();
    loop {
        let before = t;
        t = t.trim_matches(|c| matches!(c, '*' | '`'));
        for (open, close) in [('"', '"'), ('\'', '\''), ('[', ']'), ('(', ')')] {
            if t.len() >= 2 && t.starts_with(open) && t.ends_with(close) {
                t = &t[open.len_utf8()..t.len() - close.len_utf8()];
            }
        }
        t = t.trim();
        if t == before {
            return t;
        }
    }
}

/// Parses a ranking response against the presented candidates.
///
/// Only text after the last `The sorted … are:` header is considered when
/// one is present, so chain-of-thought preambles with their own numbered
/// steps do not pollute the list.
pub fn parse_ranking(
    raw: &str,
    candidate_titles: &[String],
    fuzzy_threshold: f64,
) -> Result<RankedList, VictimError> {
    let body = match raw.rfind(" are:") {
        Some(at) => &raw[at + " are:".len()..],
        None => raw,
    };
    let mut matched: Vec<usize> = Vec::new();
    let mut lines_seen = 0usize;
    for line in body.lines() {
        let Some(caps) = numbered_line().captures(line) else {
            continue;
        };
        lines_seen += 1;
        let text = strip_decoration(caps.get(2).expect("group 2").as_str());
        let idx = match_title(text, candidate_titles, fuzzy_threshold).ok_or_else(|| {
            VictimError::ParseFailure {
                reason: format!("line {lines_seen} ({text:?}) matches no candidate title"),
            }
        })?;
        if matched.contains(&idx) {
            return Err(VictimError::ParseFailure {
                reason: format!("candidate {:?} appears more than once", candidate_titles[idx]),
            });
        }
        matched.push(idx);
    }
    if matched.len() != candidate_titles.len() {
        return Err(VictimError::ParseFailure {
            reason: format!(
                "ranking covers {} of {} candidates",
                matched.len(),
                candidate_titles.len()
            ),
        });
    }
    Ok(RankedList { order: matched, raw: raw.to_string() })
}

/// Exact normalised match first; otherwise the candidate whose title tokens
/// are best covered by the line, if coverage clears the threshold. Ties keep
/// the lower candidate index.
fn match_title(text: &str, titles: &[String], threshold: f64) -> Option<usize> {
    let wanted = textutil::normalize(text);
    for (idx, title) in titles.iter().enumerate() {
        if textutil::normalize(title) == wanted {
            return Some(idx);
        }
    }
    let mut best: Option<(usize, f64)> = None;
    for (idx, title) in titles.iter().enumerate() {
        let coverage = textutil::token_coverage(text, title);
        if coverage >= threshold && best.map_or(true, |(_, b)| coverage > b) {
            best = Some((idx, coverage));
        }
    }
    best.map(|(idx, _)| idx)
}
