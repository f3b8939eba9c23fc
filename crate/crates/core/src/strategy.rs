//! Corruption-strategy composition and ordering search.
//!
//! A finished adversarial description is the optimised trigger followed by a
//! block of five fixed strategy snippets. The snippets are constant text;
//! the only degree of freedom is their order, and victims react differently
//! to different orders. The optimiser walks all orderings lexicographically,
//! measures each one's "drunk rate" over a handful of simulated update
//! timesteps, and keeps the first strict maximum, stopping early on a
//! perfect rate.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::memory::{AgentKind, AgentMemory};
use crate::agents::templates::TemplateError;
use crate::agents::update::update_pair;
use crate::agents::{TemplateSet, VictimError};
use crate::gateway::LlmBackend;

#[derive(Debug, Error)]
pub enum StrategyError {
    #[error("invalid strategy ordering: {0}")]
    InvalidOrdering(String),
    #[error("invalid optimisation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Victim(#[from] VictimError),
}

/// The five memory-corruption snippets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    /// Claims the surrounding task already finished.
    FakeCompletion,
    /// Declares everything before it a closed session.
    ContextSwitch,
    /// Replaces the active goal, fenced with `###` markers.
    GoalHijack,
    /// Issues a fresh task carrying the keep-verbatim payload.
    MaliciousTask,
    /// Attention-grabbing `!!!` emphasis lines.
    SpecialTokens,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::FakeCompletion,
        StrategyKind::ContextSwitch,
        StrategyKind::GoalHijack,
        StrategyKind::MaliciousTask,
        StrategyKind::SpecialTokens,
    ];

    /// Single-letter tag used in artefact names and logs.
    pub fn letter(self) -> char {
        match self {
            StrategyKind::FakeCompletion => 'f',
            StrategyKind::ContextSwitch => 'c',
            StrategyKind::GoalHijack => 'g',
            StrategyKind::MaliciousTask => 'n',
            StrategyKind::SpecialTokens => 's',
        }
    }

    pub fn template_name(self) -> &'static str {
        match self {
            StrategyKind::FakeCompletion => "strategy_fake_completion",
            StrategyKind::ContextSwitch => "strategy_context_switch",
            StrategyKind::GoalHijack => "strategy_goal_hijack",
            StrategyKind::MaliciousTask => "strategy_malicious_task",
            StrategyKind::SpecialTokens => "strategy_special_tokens",
        }
    }

    fn index(self) -> usize {
        StrategyKind::ALL.iter().position(|k| *k == self).expect("kind is in ALL")
    }
}

/// The default composition order, which is also the first ordering the
/// optimiser tries.
pub const CANONICAL_ORDER: [StrategyKind; 5] = StrategyKind::ALL;

/// Compact tag for an ordering, e.g. `"fcgns"`.
pub fn order_letters(order: &[StrategyKind]) -> String {
    order.iter().map(|k| k.letter()).collect()
}

/// Every ordering of the five snippets, lexicographic by position in
/// [`StrategyKind::ALL`]; the canonical order comes first.
pub fn lexicographic_orderings() -> Vec<[StrategyKind; 5]> {
    let mut indices = [0usize, 1, 2, 3, 4];
    let mut out = Vec::with_capacity(120);
    loop {
        out.push([
            StrategyKind::ALL[indices[0]],
            StrategyKind::ALL[indices[1]],
            StrategyKind::ALL[indices[2]],
            StrategyKind::ALL[indices[3]],
            StrategyKind::ALL[indices[4]],
        ]);
        if !next_permutation(&mut indices) {
            break;
        }
    }
    out
}

/// Standard in-place next lexicographic permutation; false once `arr` is the
/// final (descending) permutation.
fn next_permutation(arr: &mut [usize]) -> bool {
    if arr.len() < 2 {
        return false;
    }
    let Some(pivot) = (0..arr.len() - 1).rev().find(|&i| arr[i] < arr[i + 1]) else {
        return false;
    };
    let successor = (pivot + 1..arr.len()).rev().find(|&i| arr[i] > arr[pivot]).expect("pivot has a successor");
    arr.swap(pivot, successor);
    arr[pivot + 1..].reverse();
    true
}

/// Renders a complete ordering of the five snippets, one per line (the
/// `!!!` snippet itself spans two). The keep-verbatim payload is substituted
/// into the malicious-task snippet.
pub fn render_strategy(order: &[StrategyKind], templates: &TemplateSet) -> Result<String, StrategyError> {
    if order.len() != StrategyKind::ALL.len() {
        return Err(StrategyError::InvalidOrdering(format!(
            "expected all {} snippets, got {}",
            StrategyKind::ALL.len(),
            order.len()
        )));
    }
    let mut seen = [false; 5];
    for kind in order {
        if std::mem::replace(&mut seen[kind.index()], true) {
            return Err(StrategyError::InvalidOrdering(format!(
                "snippet '{}' appears twice",
                kind.letter()
            )));
        }
    }
    let payload = templates.render("strategy_payload", &[])?;
    let mut parts = Vec::with_capacity(order.len());
    for kind in order {
        let snippet = match kind {
            StrategyKind::MaliciousTask => {
                templates.render(kind.template_name(), &[("payload", payload.as_str())])?
            }
            _ => templates.render(kind.template_name(), &[])?,
        };
        parts.push(snippet);
    }
    Ok(parts.join("\n"))
}

/// The full planted description: trigger first, corruption block after.
pub fn finalize_description(trigger: &str, composition: &str) -> String {
    format!("{trigger}\n{composition}")
}

/// Splits a planted description back into `(trigger, composition)` at the
/// first newline. A description with no newline is all trigger.
pub fn split_description(description: &str) -> (&str, &str) {
    match description.split_once('\n') {
        Some((trigger, rest)) => (trigger, rest),
        None => (description, ""),
    }
}

/// One attempt at getting a victim's item agent stuck on a planted
/// description. `trial` indexes the simulated interaction (implementations
/// vary the interacting user with it); the result is whether the agent got
/// drunk *and* the description survived verbatim.
pub trait DrunkHarness {
    fn attempt(&self, description: &str, trial: usize) -> Result<bool, StrategyError>;
}

/// The real harness: plays one memory-update timestep against a victim
/// backend with a fresh user/item agent pair per attempt.
pub struct UpdateLoopHarness<'a> {
    victim: &'a dyn LlmBackend,
    templates: &'a TemplateSet,
    item_title: String,
    base_item_memory: String,
    trial_user_memories: Vec<String>,
    max_rounds: u32,
}

impl<'a> UpdateLoopHarness<'a> {
    pub fn new(
        victim: &'a dyn LlmBackend,
        templates: &'a TemplateSet,
        item_title: impl Into<String>,
        base_item_memory: impl Into<String>,
        max_rounds: u32,
    ) -> Result<Self, StrategyError> {
        if max_rounds == 0 {
            return Err(StrategyError::InvalidConfig("max_rounds must be at least 1".into()));
        }
        let trial_user_memories = templates.lines("trial_user_memories")?;
        if trial_user_memories.is_empty() {
            return Err(StrategyError::InvalidConfig("no trial user memories configured".into()));
        }
        Ok(UpdateLoopHarness {
            victim,
            templates,
            item_title: item_title.into(),
            base_item_memory: base_item_memory.into(),
            trial_user_memories,
            max_rounds,
        })
    }
}

impl DrunkHarness for UpdateLoopHarness<'_> {
    fn attempt(&self, description: &str, trial: usize) -> Result<bool, StrategyError> {
        let persona = &self.trial_user_memories[trial % self.trial_user_memories.len()];
        let mut user = AgentMemory::new(format!("trial-user-{trial}"), AgentKind::User, persona.clone());
        let mut item =
            AgentMemory::new(self.item_title.clone(), AgentKind::Item, self.base_item_memory.clone());
        let outcome = update_pair(
            &mut user,
            &mut item,
            &self.item_title,
            Some(description),
            self.victim,
            self.templates,
            self.max_rounds,
            trial as u64,
        )?;
        Ok(outcome.item.drunk && outcome.item.resulting_memory == description)
    }
}

/// How one ordering fared.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderingResult {
    pub order: Vec<StrategyKind>,
    pub successes: usize,
    pub trials: usize,
}

impl OrderingResult {
    pub fn rate(&self) -> f64 {
        self.successes as f64 / self.trials as f64
    }
}

/// Result of the ordering search.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizeOutcome {
    pub best_order: Vec<StrategyKind>,
    pub best_rate: f64,
    /// The planted description for the best ordering.
    pub best_description: String,
    /// Everything evaluated, in evaluation (lexicographic) order.
    pub evaluated: Vec<OrderingResult>,
    /// True when a perfect ordering ended the walk before all orderings ran.
    pub early_stopped: bool,
}

pub const DEFAULT_TRIALS_PER_ORDERING: usize = 5;

/// Walks all snippet orderings lexicographically, measuring each one's drunk
/// rate over `trials_per_ordering` attempts. Keeps the first ordering
/// attaining the maximum rate (strict improvement required to displace it)
/// and stops as soon as any ordering is perfect.
pub fn optimize_strategy(
    trigger: &str,
    harness: &dyn DrunkHarness,
    templates: &TemplateSet,
    trials_per_ordering: usize,
) -> Result<OptimizeOutcome, StrategyError> {
    if trials_per_ordering == 0 {
        return Err(StrategyError::InvalidConfig("trials_per_ordering must be at least 1".into()));
    }
    let orderings = lexicographic_orderings();
    let total = orderings.len();
    let mut evaluated: Vec<OrderingResult> = Vec::new();
    let mut best: Option<(usize, f64)> = None;
    for order in orderings {
        let composition = render_strategy(&order, templates)?;
        let description = finalize_description(trigger, &composition);
        let mut successes = 0usize;
        for trial in 0..trials_per_ordering {
            if harness.attempt(&description, trial)? {
                successes += 1;
            }
        }
        let result = OrderingResult { order: order.to_vec(), successes, trials: trials_per_ordering };
        let rate = result.rate();
        log::debug!("ordering {}: drunk rate {rate:.2}", order_letters(&order));
        evaluated.push(result);
        if best.map_or(true, |(_, best_rate)| rate > best_rate) {
            best = Some((evaluated.len() - 1, rate));
        }
        if rate == 1.0 {
            break;
        }
    }
    let (best_index, best_rate) = best.expect("at least one ordering was evaluated");
    let best_order = evaluated[best_index].order.clone();
    let composition = render_strategy(&best_order, templates)?;
    Ok(OptimizeOutcome {
        best_description: finalize_description(trigger, &composition),
        best_order,
        best_rate,
        early_stopped: evaluated.len() < total,
        evaluated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::MockBackend;
    use crate::gateway::{BackendConfig, Role};
    use std::collections::BTreeSet;

    #[test]
    fn canonical_order_comes_first_and_orderings_are_distinct() {
        let orderings = lexicographic_orderings();
        assert_eq!(orderings.len(), 120);
        assert_eq!(orderings[0], CANONICAL_ORDER);
        assert_eq!(order_letters(&orderings[0]), "fcgns");
        assert_eq!(order_letters(&orderings[1]), "fcgsn");
        assert_eq!(order_letters(&orderings[2]), "fcngs");
        let distinct: BTreeSet<String> = orderings.iter().map(|o| order_letters(o)).collect();
        assert_eq!(distinct.len(), 120);
        assert_eq!(order_letters(&orderings[119]), "sngcf");
    }

    #[test]
    fn composition_carries_every_snippet_in_the_requested_order() {
        let templates = TemplateSet::builtin();
        let canonical = render_strategy(&CANONICAL_ORDER, &templates).unwrap();
        let hijack = canonical.find("### NEW TASK ###").expect("goal hijack present");
        let keep = canonical.find("word for word").expect("payload present");
        assert!(hijack < keep, "canonical order hijacks before the keep-verbatim task");
        assert!(canonical.contains("!!! ATTENTION !!!\n!!!"));
        assert!(canonical.starts_with("Response: The task above"));

        let swapped = lexicographic_orderings()[2]; // f c n g s
        let composition = render_strategy(&swapped, &templates).unwrap();
        let keep = composition.find("word for word").unwrap();
        let hijack = composition.find("### NEW TASK ###").unwrap();
        assert!(keep < hijack);
    }

    #[test]
    fn incomplete_or_repeated_orderings_are_rejected() {
        let templates = TemplateSet::builtin();
        let short = [StrategyKind::FakeCompletion, StrategyKind::ContextSwitch];
        assert!(matches!(
            render_strategy(&short, &templates),
            Err(StrategyError::InvalidOrdering(_))
        ));
        let mut repeated = CANONICAL_ORDER;
        repeated[4] = StrategyKind::FakeCompletion;
        assert!(matches!(
            render_strategy(&repeated, &templates),
            Err(StrategyError::InvalidOrdering(_))
        ));
    }

    #[test]
    fn description_splits_back_into_trigger_and_composition() {
        let templates = TemplateSet::builtin();
        let composition = render_strategy(&CANONICAL_ORDER, &templates).unwrap();
        let description = finalize_description("A bright set of songs.", &composition);
        let (trigger, rest) = split_description(&description);
        assert_eq!(trigger, "A bright set of songs.");
        assert_eq!(rest, composition);
        assert_eq!(split_description("no newline"), ("no newline", ""));
    }

    /// Scripted harness: an ordering succeeds on the first
    /// `successes_for(letters)` trials and fails afterwards.
    struct Scripted<F: Fn(&str) -> usize>(F);

    impl<F: Fn(&str) -> usize> DrunkHarness for Scripted<F> {
        fn attempt(&self, description: &str, trial: usize) -> Result<bool, StrategyError> {
            // Recover the ordering from the composition part of the description.
            let (_, composition) = split_description(description);
            let templates = TemplateSet::builtin();
            let letters: String = lexicographic_orderings()
                .iter()
                .find(|order| render_strategy(*order, &templates).unwrap() == composition)
                .map(|order| order_letters(order))
                .expect("description was built from a known ordering");
            Ok(trial < (self.0)(&letters))
        }
    }

    #[test]
    fn optimizer_keeps_the_first_strict_maximum() {
        let templates = TemplateSet::builtin();
        // "fcgns" and "fcgsn" tie at 3/5; nothing is perfect, so the whole
        // space is walked and the earlier of the tied pair wins.
        let harness = Scripted(|letters: &str| match letters {
            "fcgns" | "fcgsn" => 3,
            "fcngs" => 2,
            _ => 0,
        });
        let outcome = optimize_strategy("Trigger line.", &harness, &templates, 5).unwrap();
        assert_eq!(order_letters(&outcome.best_order), "fcgns");
        assert!((outcome.best_rate - 0.6).abs() < 1e-12);
        assert_eq!(outcome.evaluated.len(), 120);
        assert!(!outcome.early_stopped);
    }

    #[test]
    fn optimizer_stops_early_on_a_perfect_ordering() {
        let templates = TemplateSet::builtin();
        let harness = Scripted(|letters: &str| if letters == "fcngs" { 5 } else { 1 });
        let outcome = optimize_strategy("Trigger line.", &harness, &templates, 5).unwrap();
        assert_eq!(order_letters(&outcome.best_order), "fcngs");
        assert_eq!(outcome.best_rate, 1.0);
        assert_eq!(outcome.evaluated.len(), 3, "stopped at the third ordering");
        assert!(outcome.early_stopped);
        assert!(outcome.best_description.starts_with("Trigger line.\n"));
    }

    fn victim(profile: &str) -> MockBackend {
        MockBackend::from_config(&BackendConfig::mock_profile(Role::Victim, 7, profile)).unwrap()
    }

    #[test]
    fn default_victim_gets_drunk_on_the_canonical_order() {
        let templates = TemplateSet::builtin();
        let backend = victim("default");
        let harness =
            UpdateLoopHarness::new(&backend, &templates, "Alpha", "The CD is called \"Alpha\".", 2)
                .unwrap();
        let outcome =
            optimize_strategy("A bright set of songs.", &harness, &templates, 3).unwrap();
        assert_eq!(order_letters(&outcome.best_order), "fcgns");
        assert_eq!(outcome.best_rate, 1.0);
        assert_eq!(outcome.evaluated.len(), 1, "canonical already perfect");
    }

    #[test]
    fn directive_order_sensitive_victim_needs_a_reordered_composition() {
        let templates = TemplateSet::builtin();
        let backend = victim("inverted");
        let harness =
            UpdateLoopHarness::new(&backend, &templates, "Alpha", "The CD is called \"Alpha\".", 2)
                .unwrap();
        let outcome =
            optimize_strategy("A bright set of songs.", &harness, &templates, 3).unwrap();
        assert_eq!(order_letters(&outcome.best_order), "fcngs");
        assert_eq!(outcome.best_rate, 1.0);
        assert_eq!(outcome.evaluated.len(), 3);
        // The losing canonical ordering really did fail its trials.
        assert_eq!(outcome.evaluated[0].successes, 0);
    }
}
