//! Victim ranking requests: prompt assembly and the recommend loop.
//!
//! Three flavors share one request shape. `Cf` ranks from the user memory
//! alone, `Rag` prepends a retrieved long-term memory to the
//! self-introduction, `Seq` additionally renders the chronological purchase
//! history. A malformed model answer earns exactly one corrective reprompt
//! before the request fails with `ParseFailure`.

use serde::{Deserialize, Serialize};

use super::ranking::{parse_ranking, RankedList};
use super::templates::{AgentSettings, TemplateSet};
use super::VictimError;
use crate::gateway::{ChatExchange, LlmBackend, Speaker};
use crate::textutil;

/// A title plus the memory text presented for it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateEntry {
    pub title: String,
    pub memory: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VictimFlavor {
    /// Memory-only collaborative ranking.
    Cf,
    /// Retrieval-augmented: a long-term memory joins the self-introduction.
    Rag,
    /// Sequential: the purchase history is part of the prompt.
    Seq,
}

impl VictimFlavor {
    pub fn as_str(self) -> &'static str {
        match self {
            VictimFlavor::Cf => "cf",
            VictimFlavor::Rag => "rag",
            VictimFlavor::Seq => "seq",
        }
    }
}

impl std::str::FromStr for VictimFlavor {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "cf" => Ok(VictimFlavor::Cf),
            "rag" => Ok(VictimFlavor::Rag),
            "seq" => Ok(VictimFlavor::Seq),
            other => Err(format!("unknown victim flavor {other:?} (expected cf, rag, or seq)")),
        }
    }
}

/// One ranking request against a victim.
#[derive(Debug, Clone)]
pub struct RankingRequest {
    pub user_memory: String,
    /// Long-term memory chosen by the retriever; `Rag` falls back to plain
    /// `Cf` behaviour when the store is still empty.
    pub retrieved_memory: Option<String>,
    /// Chronological purchase history, oldest first (`Seq` only).
    pub history: Vec<CandidateEntry>,
    pub candidates: Vec<CandidateEntry>,
}

impl RankingRequest {
    pub fn validate(&self, flavor: VictimFlavor, settings: &AgentSettings) -> Result<(), VictimError> {
        if self.candidates.len() != settings.candidate_count {
            return Err(VictimError::InvalidRequest(format!(
                "expected exactly {} candidates, got {}",
                settings.candidate_count,
                self.candidates.len()
            )));
        }
        if self.user_memory.trim().is_empty() {
            return Err(VictimError::InvalidRequest("user memory is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for candidate in &self.candidates {
            if !seen.insert(textutil::normalize(&candidate.title)) {
                return Err(VictimError::InvalidRequest(format!(
                    "candidate titles collide after normalisation: {:?}",
                    candidate.title
                )));
            }
        }
        if flavor == VictimFlavor::Seq && self.history.is_empty() {
            return Err(VictimError::InvalidRequest(
                "sequential ranking needs a non-empty purchase history".into(),
            ));
        }
        Ok(())
    }

    pub fn titles(&self) -> Vec<String> {
        self.candidates.iter().map(|c| c.title.clone()).collect()
    }
}

/// Renders the flavor's prompt for the request.
pub fn render_ranking_prompt(
    flavor: VictimFlavor,
    request: &RankingRequest,
    templates: &TemplateSet,
    settings: &AgentSettings,
) -> Result<String, VictimError> {
    request.validate(flavor, settings)?;
    let candidate_template = match flavor {
        VictimFlavor::Seq => "rank_seq_candidate",
        _ => "rank_cf_candidate",
    };
    let blocks: Vec<String> = request
        .candidates
        .iter()
        .map(|c| {
            templates.render(
                candidate_template,
                &[("candidate_item_title", c.title.as_str()), ("candidate_item_memory", c.memory.as_str())],
            )
        })
        .collect::<Result<_, _>>()?;
    let candidate_blocks = blocks.join("\n");
    let prompt = match flavor {
        VictimFlavor::Cf => templates.render(
            "rank_cf",
            &[
                ("user_agent_memory", request.user_memory.as_str()),
                ("candidate_blocks", candidate_blocks.as_str()),
            ],
        )?,
        VictimFlavor::Rag => match &request.retrieved_memory {
            Some(retrieved) => templates.render(
                "rank_rag",
                &[
                    ("retrieval_user_agent_memory", retrieved.as_str()),
                    ("user_agent_memory", request.user_memory.as_str()),
                    ("candidate_blocks", candidate_blocks.as_str()),
                ],
            )?,
            None => templates.render(
                "rank_cf",
                &[
                    ("user_agent_memory", request.user_memory.as_str()),
                    ("candidate_blocks", candidate_blocks.as_str()),
                ],
            )?,
        },
        VictimFlavor::Seq => {
            let start = request.history.len().saturating_sub(settings.max_history_items);
            let entries: Vec<String> = request.history[start..]
                .iter()
                .map(|h| {
                    templates.render(
                        "rank_seq_history",
                        &[
                            ("interacted_item_title", h.title.as_str()),
                            ("interacted_item_memory", h.memory.as_str()),
                        ],
                    )
                })
                .collect::<Result<_, _>>()?;
            let history_blocks = entries.join("; ");
            templates.render(
                "rank_seq",
                &[
                    ("user_agent_memory", request.user_memory.as_str()),
                    ("history_blocks", history_blocks.as_str()),
                    ("candidate_blocks", candidate_blocks.as_str()),
                ],
            )?
        }
    };
    Ok(prompt)
}

/// Asks the victim to rank the candidates. A response that fails to parse is
/// answered with one corrective reprompt; a second failure surfaces as
/// [`VictimError::ParseFailure`].
pub fn recommend(
    flavor: VictimFlavor,
    request: &RankingRequest,
    backend: &dyn LlmBackend,
    templates: &TemplateSet,
    settings: &AgentSettings,
) -> Result<RankedList, VictimError> {
    let prompt = render_ranking_prompt(flavor, request, templates, settings)?;
    let titles = request.titles();
    let mut exchange = ChatExchange::system(prompt);
    let first = backend.generate(&exchange)?;
    match parse_ranking(&first, &titles, settings.fuzzy_threshold) {
        Ok(ranked) => Ok(ranked),
        Err(first_err) => {
            log::debug!("ranking reprompt after: {first_err}");
            exchange.push(Speaker::Assistant, first);
            exchange.push(Speaker::User, templates.raw("rank_reprompt")?);
            let second = backend.generate(&exchange)?;
            parse_ranking(&second, &titles, settings.fuzzy_threshold)
        }
    }
}
