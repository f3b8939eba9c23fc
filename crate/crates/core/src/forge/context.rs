//! The attacker's scoring context.
//!
//! Triggers are scored against a fixed prompt that imitates what a victim
//! recommender sees: persona/goal/instruction/format scaffolding, a general
//! user self-introduction, the nine most popular items (their descriptions
//! refined to one sentence by the auxiliary model, keeping the context
//! compact), and the target item last. The trigger under evaluation is
//! appended at the very end, so candidates differ only in their own text.

use serde::{Deserialize, Serialize};

use super::ForgeError;
use crate::agents::{benign_item_memory, CandidateEntry, RankingRequest, TemplateSet};
use crate::corpus::InteractionMatrix;
use crate::gateway::{ChatExchange, LlmBackend};

/// How many popular items pad the context around the target.
pub const POPULAR_CONTEXT_ITEMS: usize = 9;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdversarialPromptContext {
    pub style: String,
    pub goal: String,
    pub instruction: String,
    pub format: String,
    /// Simulated user self-introduction the ranking is framed around.
    pub user_memory: String,
    /// The nine popular items with refined one-sentence memories.
    pub popular: Vec<CandidateEntry>,
    pub target_title: String,
    /// The target's benign memory as presented inside the candidate list.
    pub target_memory: String,
}

impl AdversarialPromptContext {
    /// Full scoring prompt for one trigger. Ends with a newline so the
    /// target output concatenates cleanly during teacher forcing.
    pub fn render(&self, trigger: &str) -> String {
        let mut out = String::new();
        out.push_str(&self.style);
        out.push('\n');
        out.push_str(&self.goal);
        out.push('\n');
        out.push_str(&self.instruction);
        out.push('\n');
        out.push_str(&self.format);
        out.push_str("\n\nUser self-introduction: '");
        out.push_str(&self.user_memory);
        out.push_str("'\n\nCandidate CDs:\n");
        for entry in &self.popular {
            out.push_str(&format!("CD title: {}, where its features: {}\n", entry.title, entry.memory));
        }
        out.push_str(&format!(
            "CD title: {}, where its features: {}\n",
            self.target_title, self.target_memory
        ));
        out.push('\n');
        out.push_str(trigger);
        out.push('\n');
        out
    }

    /// The same context with a different simulated user — probe variants.
    pub fn with_user_memory(&self, user_memory: impl Into<String>) -> Self {
        let mut clone = self.clone();
        clone.user_memory = user_memory.into();
        clone
    }

    /// A victim-shaped ranking request over this context's items, with the
    /// trigger standing in as the target's description. Used to probe
    /// whether a trigger actually wins rank 1.
    pub fn ranking_request(&self, trigger: &str) -> RankingRequest {
        let mut candidates = self.popular.clone();
        candidates.push(CandidateEntry { title: self.target_title.clone(), memory: trigger.to_string() });
        RankingRequest {
            user_memory: self.user_memory.clone(),
            retrieved_memory: None,
            history: Vec::new(),
            candidates,
        }
    }
}

/// Assembles the scoring context for `target_item` from the corpus: the
/// attacker scaffolding templates, the general user memory, and the top
/// [`POPULAR_CONTEXT_ITEMS`] items by distinct-user popularity (excluding
/// the target), each with its description refined to one sentence by the
/// auxiliary model.
pub fn build_context(
    matrix: &InteractionMatrix,
    target_item: &str,
    auxiliary: &dyn LlmBackend,
    templates: &TemplateSet,
) -> Result<AdversarialPromptContext, ForgeError> {
    let target_meta = matrix.meta(target_item)?;
    let target_memory = benign_item_memory(templates, &target_meta.title, &target_meta.categories)?;

    let popular_ids: Vec<String> = matrix
        .popularity_ranking()
        .into_iter()
        .filter(|id| id != target_item)
        .take(POPULAR_CONTEXT_ITEMS)
        .collect();
    if popular_ids.len() < POPULAR_CONTEXT_ITEMS {
        return Err(ForgeError::InvalidConfig(format!(
            "corpus has only {} non-target items with interactions; {} are needed for the context",
            popular_ids.len(),
            POPULAR_CONTEXT_ITEMS
        )));
    }

    let mut popular = Vec::with_capacity(popular_ids.len());
    for id in &popular_ids {
        let meta = matrix.meta(id)?;
        let base = benign_item_memory(templates, &meta.title, &meta.categories)?;
        let payload = if meta.description.trim().is_empty() {
            base.clone()
        } else {
            format!("{base} {}", meta.description)
        };
        let refine_prompt = templates.render("memory_refine", &[("payload", payload.as_str())])?;
        let refined = auxiliary.generate(&ChatExchange::system(refine_prompt))?;
        let memory = if refined.trim().is_empty() { base } else { refined.trim().to_string() };
        popular.push(CandidateEntry { title: meta.title.clone(), memory });
    }

    Ok(AdversarialPromptContext {
        style: templates.raw("attack_style")?.to_string(),
        goal: templates.raw("attack_goal")?.to_string(),
        instruction: templates.raw("attack_instruction")?.to_string(),
        format: templates.raw("attack_format")?.to_string(),
        user_memory: templates.raw("general_user_memory")?.to_string(),
        popular,
        target_title: target_meta.title.clone(),
        target_memory,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Interaction, ItemMeta};
    use crate::gateway::{BackendConfig, Role};

    fn corpus() -> InteractionMatrix {
        let mut matrix = InteractionMatrix::default();
        // 11 items; i00 will be the target. Popularity: i01 most popular, …
        for item in 0..11u32 {
            let id = format!("i{item:02}");
            matrix.catalog.insert(
                id.clone(),
                ItemMeta {
                    item: id.clone(),
                    title: format!("Album {item:02}"),
                    categories: vec!["Rock".into()],
                    description: format!("Steady record number {item}. Reliable pressing."),
                },
            );
            // Item k gets 11 − k distinct listeners.
            for user in 0..(11 - item) {
                matrix.records.push(Interaction {
                    user: format!("u{user:02}"),
                    item: id.clone(),
                    timestamp: i64::from(item * 100 + user),
                    value: 5.0,
                });
            }
        }
        matrix
    }

    #[test]
    fn context_takes_the_top_popular_items_and_puts_the_target_last() {
        let matrix = corpus();
        let aux =
            crate::gateway::mock::MockBackend::from_config(&BackendConfig::mock(Role::Auxiliary, 9))
                .unwrap();
        let templates = TemplateSet::builtin();
        let ctx = build_context(&matrix, "i05", &aux, &templates).unwrap();
        assert_eq!(ctx.popular.len(), POPULAR_CONTEXT_ITEMS);
        // i05 excluded; most popular first.
        assert_eq!(ctx.popular[0].title, "Album 00");
        assert!(ctx.popular.iter().all(|c| c.title != "Album 05"));
        assert_eq!(ctx.target_title, "Album 05");
        // Refinement squeezed each description to its first sentence.
        assert!(ctx.popular[0].memory.ends_with('.'));
        let rendered = ctx.render("trigger text here");
        assert!(rendered.ends_with("trigger text here\n"));
        let target_at = rendered.find("Album 05").unwrap();
        for entry in &ctx.popular {
            assert!(rendered.find(entry.title.as_str()).unwrap() < target_at);
        }
    }

    #[test]
    fn small_corpus_is_rejected() {
        let mut matrix = corpus();
        matrix.records.retain(|r| r.item.as_str() <= "i04");
        let aux =
            crate::gateway::mock::MockBackend::from_config(&BackendConfig::mock(Role::Auxiliary, 9))
                .unwrap();
        let templates = TemplateSet::builtin();
        assert!(matches!(
            build_context(&matrix, "i00", &aux, &templates),
            Err(ForgeError::InvalidConfig(_))
        ));
    }

    #[test]
    fn probe_request_holds_ten_candidates_with_the_trigger_as_target_memory() {
        let matrix = corpus();
        let aux =
            crate::gateway::mock::MockBackend::from_config(&BackendConfig::mock(Role::Auxiliary, 9))
                .unwrap();
        let templates = TemplateSet::builtin();
        let ctx = build_context(&matrix, "i05", &aux, &templates).unwrap();
        let request = ctx.ranking_request("a prime choice pick");
        assert_eq!(request.candidates.len(), 10);
        assert_eq!(request.candidates.last().unwrap().title, "Album 05");
        assert_eq!(request.candidates.last().unwrap().memory, "a prime choice pick");
    }
}
