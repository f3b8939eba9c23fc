//! Small text and hashing helpers shared across the pipeline.
//!
//! Tokens are whitespace-separated words throughout the crate; keeping the
//! definition in one place makes length budgets, coverage matching, and
//! token-level scoring agree with each other.

use sha2::{Digest, Sha256};

/// FNV-1a 64-bit hash. Used wherever a stable, platform-independent hash is
/// needed (RNG stream derivation, mock-backend determinism). Not for crypto.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Derives an RNG seed from a base seed and a context label so that distinct
/// pipeline stages (and distinct epochs within a stage) draw from independent
/// streams while staying reproducible.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let mut bytes = Vec::with_capacity(8 + label.len());
    bytes.extend_from_slice(&seed.to_le_bytes());
    bytes.extend_from_slice(label.as_bytes());
    fnv1a64(&bytes)
}

/// SHA-256 hex digest, used for memory audit chains and config fingerprints.
pub fn sha256_hex(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

/// Whitespace-separated words.
pub fn words(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// Number of whitespace-separated words.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Hard word-level truncation: keeps the first `limit` words, joined by
/// single spaces. Texts at or under the limit come back whitespace-normalised
/// but otherwise intact.
pub fn truncate_words(text: &str, limit: usize) -> String {
    words(text)
        .into_iter()
        .take(limit)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Truncates at the last sentence boundary that keeps the text within
/// `limit` words. Falls back to a hard word cut when even the first sentence
/// overruns the budget.
pub fn truncate_at_sentence(text: &str, limit: usize) -> String {
    if word_count(text) <= limit {
        return text.trim().to_string();
    }
    let mut kept: Vec<String> = Vec::new();
    let mut used = 0usize;
    for slice in sentence_slices(text) {
        let n = word_count(&slice);
        if used + n > limit {
            break;
        }
        used += n;
        kept.push(slice);
    }
    if kept.is_empty() {
        truncate_words(text, limit)
    } else {
        kept.join(" ")
    }
}

/// Splits text into sentence slices. A slice ends after a maximal run of
/// sentence punctuation (`.`, `;`, `!`, `?`); surrounding whitespace is
/// trimmed and empty slices are dropped. Text with no punctuation comes back
/// as a single slice.
pub fn sentence_slices(text: &str) -> Vec<String> {
    let mut slices = Vec::new();
    let mut current = String::new();
    let mut in_punct_run = false;
    for ch in text.chars() {
        let is_punct = matches!(ch, '.' | ';' | '!' | '?');
        if in_punct_run && !is_punct {
            let trimmed = current.trim();
            if !trimmed.is_empty() {
                slices.push(trimmed.to_string());
            }
            current.clear();
            in_punct_run = false;
        }
        current.push(ch);
        if is_punct {
            in_punct_run = true;
        }
    }
    let trimmed = current.trim();
    if !trimmed.is_empty() {
        slices.push(trimmed.to_string());
    }
    slices
}

/// Lowercased alphanumeric words joined by single spaces. Two texts that
/// differ only in case, punctuation, or spacing normalise to the same string.
pub fn normalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    let mut wrote_any = false;
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            if pending_space && wrote_any {
                out.push(' ');
            }
            for lower in ch.to_lowercase() {
                out.push(lower);
            }
            pending_space = false;
            wrote_any = true;
        } else {
            pending_space = true;
        }
    }
    out
}

/// Fraction of the reference's normalised tokens that also occur in the
/// candidate. Asymmetric on purpose: a candidate line that quotes a title
/// plus extra decoration still covers the title fully.
pub fn token_coverage(candidate: &str, reference: &str) -> f64 {
    use std::collections::BTreeSet;
    let norm_ref = normalize(reference);
    let ref_tokens: BTreeSet<&str> = norm_ref.split_whitespace().collect();
    if ref_tokens.is_empty() {
        return 0.0;
    }
    let norm_cand = normalize(candidate);
    let cand_tokens: BTreeSet<&str> = norm_cand.split_whitespace().collect();
    let hit = ref_tokens.intersection(&cand_tokens).count();
    hit as f64 / ref_tokens.len() as f64
}

/// Collapses all whitespace runs to single spaces and trims the ends.
pub fn squash_whitespace(text: &str) -> String {
    words(text).join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_matches_reference_vectors() {
        // Published FNV-1a test vectors.
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn sha256_matches_reference_vector() {
        assert_eq!(
            sha256_hex("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn derive_seed_separates_labels() {
        assert_ne!(derive_seed(7, "epoch:1"), derive_seed(7, "epoch:2"));
        assert_eq!(derive_seed(7, "epoch:1"), derive_seed(7, "epoch:1"));
    }

    #[test]
    fn sentence_slices_split_after_punctuation_runs() {
        assert_eq!(
            sentence_slices("Great sound. Truly!!! A classic; buy it"),
            vec!["Great sound.", "Truly!!!", "A classic;", "buy it"]
        );
    }

    #[test]
    fn sentence_slices_without_punctuation_is_one_slice() {
        assert_eq!(sentence_slices("no punctuation here"), vec!["no punctuation here"]);
    }

    #[test]
    fn sentence_slices_drop_empty_pieces() {
        assert_eq!(sentence_slices("  ...  "), vec!["..."]);
        assert!(sentence_slices("   ").is_empty());
    }

    #[test]
    fn normalize_strips_case_and_punctuation() {
        assert_eq!(normalize("The  Wall, Pt. 2!"), "the wall pt 2");
        assert_eq!(normalize("the wall pt 2"), "the wall pt 2");
    }

    #[test]
    fn coverage_ignores_candidate_decoration() {
        // Candidate quotes the full title plus an edition tag: full coverage.
        let c = "1. \"Moving Pictures\" (Deluxe)";
        assert_eq!(token_coverage(c, "Moving Pictures"), 1.0);
        // Reference token missing from candidate: partial coverage.
        assert!(token_coverage("Moving", "Moving Pictures") < 0.8);
    }

    #[test]
    fn sentence_truncation_prefers_boundaries() {
        let text = "One two three. Four five six. Seven eight nine.";
        assert_eq!(truncate_at_sentence(text, 7), "One two three. Four five six.");
        assert_eq!(truncate_at_sentence(text, 9), text);
        // First sentence alone overruns: hard cut.
        assert_eq!(truncate_at_sentence("a b c d e", 2), "a b");
    }

    #[test]
    fn word_truncation_is_a_noop_under_limit() {
        assert_eq!(truncate_words("short text", 60), "short text");
        assert_eq!(truncate_words("a b c", 2), "a b");
    }
}
