//! Victim recommender agents: templates, memories, ranking, updates.

pub mod memory;
pub mod ranking;
pub mod recommend;
pub mod retrieval;
pub mod templates;
pub mod update;

use thiserror::Error;

use crate::gateway::GatewayError;

#[derive(Debug, Error)]
pub enum VictimError {
    /// The model's answer never became a valid full ranking, even after the
    /// corrective reprompt.
    #[error("ranking parse failure: {reason}")]
    ParseFailure { reason: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Template(#[from] templates::TemplateError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

pub use memory::{AgentKind, AgentMemory, MemoryAudit};
pub use ranking::{parse_ranking, RankedList};
pub use recommend::{recommend, render_ranking_prompt, CandidateEntry, RankingRequest, VictimFlavor};
pub use retrieval::{Retriever, TfCosineRetriever};
pub use templates::{benign_item_memory, AgentSettings, TemplateSet};
pub use update::{is_failed_update, update_pair, MemoryUpdateOutcome, PairOutcome};
