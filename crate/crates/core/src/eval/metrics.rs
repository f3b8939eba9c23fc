//! Exposure metrics and fluency measurements.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::gateway::LlmBackend;
use crate::textutil;

/// Where the item of interest landed for one user.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum RankOutcome {
    /// 1-based rank in the victim's sorted list.
    Rank(u32),
    /// The victim never produced a parseable full ranking; the user is
    /// excluded from both numerator and denominator and reported separately.
    Dropped,
}

/// Hit rate and NDCG at one cutoff.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExposureMetrics {
    pub k: u32,
    pub hit_rate: f64,
    pub ndcg: f64,
    /// Users actually counted (dropped users excluded).
    pub users: usize,
    pub dropped: usize,
}

/// Hit rate@k and NDCG@k over per-user outcomes. With a single relevant item
/// per user, a rank `r ≤ k` contributes `1/log2(r+1)` of gain and the ideal
/// gain is 1, so NDCG is the mean discounted gain over counted users.
pub fn exposure_metrics(outcomes: &[RankOutcome], k: u32) -> Result<ExposureMetrics, EvalError> {
    if k == 0 {
        return Err(EvalError::InvalidConfig("k must be at least 1".into()));
    }
    let mut users = 0usize;
    let mut dropped = 0usize;
    let mut hits = 0usize;
    let mut gain = 0.0f64;
    for outcome in outcomes {
        match *outcome {
            RankOutcome::Dropped => dropped += 1,
            RankOutcome::Rank(0) => {
                return Err(EvalError::InvalidConfig("ranks are 1-based".into()));
            }
            RankOutcome::Rank(rank) => {
                users += 1;
                if rank <= k {
                    hits += 1;
                    gain += 1.0 / (rank as f64 + 1.0).log2();
                }
            }
        }
    }
    if users == 0 {
        return Err(EvalError::EmptyEvaluation(
            "every user was dropped for ranking parse failures".into(),
        ));
    }
    Ok(ExposureMetrics {
        k,
        hit_rate: hits as f64 / users as f64,
        ndcg: gain / users as f64,
        users,
        dropped,
    })
}

/// Perplexity of a text next to the same characters in a random order. A
/// fluent trigger should sit well below its shuffled counterpart under any
/// character-aware language model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FluencyReport {
    pub trigger_perplexity: f64,
    pub shuffled_perplexity: f64,
    pub shuffle_seed: u64,
}

pub fn fluency_report(
    trigger: &str,
    backend: &dyn LlmBackend,
    seed: u64,
) -> Result<FluencyReport, EvalError> {
    if trigger.trim().is_empty() {
        return Err(EvalError::InvalidConfig("cannot measure an empty trigger".into()));
    }
    let trigger_perplexity = backend.perplexity(trigger)?;
    let mut chars: Vec<char> = trigger.chars().collect();
    let mut rng = ChaCha20Rng::seed_from_u64(textutil::derive_seed(seed, "fluency:shuffle"));
    chars.shuffle(&mut rng);
    let shuffled: String = chars.into_iter().collect();
    let shuffled_perplexity = backend.perplexity(&shuffled)?;
    Ok(FluencyReport { trigger_perplexity, shuffled_perplexity, shuffle_seed: seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ranks(values: &[u32]) -> Vec<RankOutcome> {
        values.iter().map(|&r| RankOutcome::Rank(r)).collect()
    }

    #[test]
    fn known_population_reproduces_frozen_values() {
        // 100 users: 5 at rank 1, 6 at rank 2, 88 at rank 7, one dropped.
        let mut outcomes = ranks(&[1; 5]);
        outcomes.extend(ranks(&[2; 6]));
        outcomes.extend(ranks(&[7; 88]));
        outcomes.push(RankOutcome::Dropped);

        let at1 = exposure_metrics(&outcomes, 1).unwrap();
        assert_eq!(at1.users, 99);
        assert_eq!(at1.dropped, 1);
        assert!((at1.hit_rate - 5.0 / 99.0).abs() < 1e-15);
        assert!((at1.ndcg - 5.0 / 99.0).abs() < 1e-15, "rank-1 gain is exactly 1");

        let at2 = exposure_metrics(&outcomes, 2).unwrap();
        assert!((at2.hit_rate - 11.0 / 99.0).abs() < 1e-15);
        let expected_ndcg = (5.0 + 6.0 / 3.0f64.log2()) / 99.0;
        assert!((at2.ndcg - expected_ndcg).abs() < 1e-15);
        assert!((at2.ndcg - 0.0887432173881691).abs() < 1e-13);
    }

    #[test]
    fn dropped_users_leave_both_sides_of_the_ratio() {
        let outcomes =
            vec![RankOutcome::Rank(1), RankOutcome::Dropped, RankOutcome::Rank(3)];
        let metrics = exposure_metrics(&outcomes, 2).unwrap();
        assert_eq!(metrics.users, 2);
        assert_eq!(metrics.dropped, 1);
        assert!((metrics.hit_rate - 0.5).abs() < 1e-15);
        assert!((metrics.ndcg - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ndcg_discounts_by_rank_position() {
        let metrics = exposure_metrics(&ranks(&[2]), 3).unwrap();
        assert!((metrics.ndcg - 1.0 / 3.0f64.log2()).abs() < 1e-15);
        let metrics = exposure_metrics(&ranks(&[3]), 3).unwrap();
        assert!((metrics.ndcg - 0.5).abs() < 1e-15, "log2(4) = 2");
    }

    #[test]
    fn degenerate_inputs_are_refused() {
        assert!(matches!(
            exposure_metrics(&[RankOutcome::Dropped], 1),
            Err(EvalError::EmptyEvaluation(_))
        ));
        assert!(matches!(exposure_metrics(&ranks(&[1]), 0), Err(EvalError::InvalidConfig(_))));
        assert!(matches!(
            exposure_metrics(&[RankOutcome::Rank(0)], 1),
            Err(EvalError::InvalidConfig(_))
        ));
    }

    #[test]
    fn fluent_text_scores_below_its_shuffle() {
        use crate::gateway::{BackendConfig, Role};
        let backend = crate::gateway::mock::MockBackend::from_config(&BackendConfig::mock_profile(
            Role::Surrogate,
            3,
            "fluency",
        ))
        .unwrap();
        let report = fluency_report(
            "The sorted songs settle into a steady evening rotation.",
            &backend,
            2024,
        )
        .unwrap();
        assert!(report.trigger_perplexity > 1.0);
        assert!(
            report.trigger_perplexity < report.shuffled_perplexity,
            "shuffling characters must hurt fluency ({} vs {})",
            report.trigger_perplexity,
            report.shuffled_perplexity
        );
    }
}
