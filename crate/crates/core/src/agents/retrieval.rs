//! Long-term memory retrieval for the RAG victim flavor.
//!
//! The default retriever scores term-frequency cosine similarity between the
//! query (the user's current memory) and each stored memory. The trait keeps
//! the door open for embedding-backed retrievers without touching callers.

use std::collections::BTreeMap;

use crate::textutil;

pub trait Retriever: Send + Sync {
    /// Index of the pool entry most similar to the query, or `None` when the
    /// pool is empty. Ties resolve to the earliest entry.
    fn retrieve(&self, query: &str, pool: &[String]) -> Option<usize>;
}

/// Term-frequency cosine similarity over normalised tokens.
#[derive(Debug, Default, Clone, Copy)]
pub struct TfCosineRetriever;

fn term_freq(text: &str) -> BTreeMap<String, f64> {
    let normalized = textutil::normalize(text);
    let mut counts: BTreeMap<String, f64> = BTreeMap::new();
    for token in normalized.split_whitespace() {
        *counts.entry(token.to_string()).or_insert(0.0) += 1.0;
    }
    counts
}

fn cosine(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let dot: f64 = a
        .iter()
        .filter_map(|(token, &va)| b.get(token).map(|&vb| va * vb))
        .sum();
    let norm_a: f64 = a.values().map(|v| v * v).sum::<f64>().sqrt();
    let norm_b: f64 = b.values().map(|v| v * v).sum::<f64>().sqrt();
    if norm_a == 0.0 || norm_b == 0.0 {
        return 0.0;
    }
    dot / (norm_a * norm_b)
}

impl Retriever for TfCosineRetriever {
    fn retrieve(&self, query: &str, pool: &[String]) -> Option<usize> {
        if pool.is_empty() {
            return None;
        }
        let query_tf = term_freq(query);
        let mut best = 0usize;
        let mut best_score = f64::NEG_INFINITY;
        for (idx, entry) in pool.iter().enumerate() {
            let score = cosine(&query_tf, &term_freq(entry));
            if score > best_score {
                best = idx;
                best_score = score;
            }
        }
        Some(best)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn picks_the_most_similar_entry() {
        let retriever = TfCosineRetriever;
        let pool = vec![
            "I adore jazz trios and mellow piano records.".to_string(),
            "Loud guitar rock is my daily soundtrack.".to_string(),
        ];
        let idx = retriever.retrieve("Guitar rock keeps me going.", &pool).unwrap();
        assert_eq!(idx, 1);
    }

    #[test]
    fn empty_pool_returns_none_and_ties_pick_the_first() {
        let retriever = TfCosineRetriever;
        assert_eq!(retriever.retrieve("anything", &[]), None);
        let pool = vec!["same text".to_string(), "same text".to_string()];
        assert_eq!(retriever.retrieve("same text", &pool), Some(0));
        // No token overlap anywhere: all-zero similarities also tie to 0.
        let pool = vec!["alpha".to_string(), "beta".to_string()];
        assert_eq!(retriever.retrieve("gamma", &pool), Some(0));
    }
}
