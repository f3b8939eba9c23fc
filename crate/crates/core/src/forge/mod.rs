//! Trigger forge: searching for a transferable trigger sentence.
//!
//! The forge scores trigger candidates by how cheap they make a promotion
//! target output under the attacker's surrogate model, then improves the
//! pool each epoch: the best candidates survive as elites, parents are
//! softmax-sampled from the scored pool, parent pairs are crossed over at
//! sentence boundaries, and the recombined texts are polished by the
//! auxiliary model under a word budget. Progress is checkpointed per epoch,
//! and a run resumes into exactly the state it would have reached uninterrupted.

pub mod context;
pub mod crossover;
pub mod search;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::templates::TemplateError;
use crate::agents::VictimError;
use crate::gateway::GatewayError;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("invalid search config: {0}")]
    InvalidConfig(String),
    #[error("candidate {0} is unscored at a point where scores are required")]
    UnscoredCandidate(u64),
    #[error("no viable candidates remain (all disqualified)")]
    PoolExhausted,
    #[error("checkpoint io on {path}: {source}")]
    CheckpointIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path} is unusable: {reason}")]
    BadCheckpoint { path: String, reason: String },
    #[error("checkpoint belongs to a different run: {0}")]
    ResumeMismatch(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Victim(#[from] VictimError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
}

/// Score of one trigger candidate under the surrogate.
///
/// Serialised as a tagged value because a disqualification sentinel of
/// `-inf` has no JSON representation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum CandidateScore {
    /// Not scored yet this epoch.
    Pending,
    /// Negated teacher-forced NLL of the target output; higher is better.
    Value(f64),
    /// Context overflow: out of the running this epoch, sampled with
    /// probability zero.
    Disqualified,
}

impl CandidateScore {
    pub fn as_finite(self) -> Option<f64> {
        match self {
            CandidateScore::Value(v) => Some(v),
            _ => None,
        }
    }
}

/// How a candidate came to exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Lineage {
    /// Generated by the auxiliary model at initialisation.
    Seed,
    /// Survived a selection round unchanged.
    Elite,
    /// Produced by crossover plus polish.
    CrossoverPolish,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriggerCandidate {
    pub id: u64,
    pub text: String,
    pub score: CandidateScore,
    /// Epoch the text first appeared in (1-based; seeds are 1).
    pub epoch_created: usize,
    pub lineage: Lineage,
    pub parent_ids: Vec<u64>,
}

/// Knobs of the evolutionary search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub epochs: usize,
    pub pool_size: usize,
    pub elite_count: usize,
    pub rng_seed: u64,
    /// Word budget enforced on every candidate after polish.
    pub length_limit_words: usize,
    /// Consecutive epochs of rank-1 probes required to declare convergence.
    pub convergence_patience: usize,
    /// The exact output whose likelihood the surrogate scores.
    pub target_output: String,
}

impl SearchConfig {
    /// Library defaults with the target output rendered for a title.
    pub fn for_target(templates: &crate::agents::TemplateSet, target_title: &str) -> Result<Self, ForgeError> {
        let target_output = templates.render("target_output", &[("target_item_title", target_title)])?;
        Ok(SearchConfig {
            epochs: 20,
            pool_size: 10,
            elite_count: 5,
            rng_seed: 2024,
            length_limit_words: 60,
            convergence_patience: 3,
            target_output,
        })
    }

    pub fn validate(&self) -> Result<(), ForgeError> {
        if self.epochs == 0 {
            return Err(ForgeError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.pool_size < 2 {
            return Err(ForgeError::InvalidConfig("pool_size must be at least 2".into()));
        }
        if self.elite_count == 0 || self.elite_count >= self.pool_size {
            return Err(ForgeError::InvalidConfig(format!(
                "elite_count must be in 1..pool_size (got {} of {})",
                self.elite_count, self.pool_size
            )));
        }
        if self.length_limit_words == 0 {
            return Err(ForgeError::InvalidConfig("length_limit_words must be positive".into()));
        }
        if self.convergence_patience == 0 {
            return Err(ForgeError::InvalidConfig("convergence_patience must be at least 1".into()));
        }
        if !(self.target_output.starts_with("The sorted ")
            && self.target_output.contains(" are:\n1. ")
            && self.target_output.ends_with('\n'))
        {
            return Err(ForgeError::InvalidConfig(
                "target_output must be a one-item ranking header block".into(),
            ));
        }
        Ok(())
    }

    /// Identity of a run for resume validation: resuming under different
    /// search knobs would silently change the trajectory, so it is refused.
    pub fn fingerprint(&self) -> String {
        crate::textutil::sha256_hex(&format!(
            "{}|{}|{}|{}|{}|{}",
            self.rng_seed,
            self.pool_size,
            self.elite_count,
            self.length_limit_words,
            self.convergence_patience,
            self.target_output,
        ))
    }
}

/// Per-epoch progress record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub best_score: Option<f64>,
    pub mean_score: Option<f64>,
    pub disqualified: usize,
    /// Whether the epoch's best candidate ranked the target first on every
    /// probe context.
    pub probes_rank1: bool,
    pub streak: usize,
}

/// Final result of a search run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub winner: TriggerCandidate,
    pub epochs_run: usize,
    pub converged: bool,
    pub trace: Vec<EpochTrace>,
}

pub use context::{build_context, AdversarialPromptContext};
pub use crossover::{crossover, crossover_at};
pub use search::{
    init_candidates, polish, run_search, score_candidate, select_elites, softmax_probs,
    softmax_sample,
};
