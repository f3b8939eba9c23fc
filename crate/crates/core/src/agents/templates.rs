//! Prompt template store.
//!
//! Every prompt the pipeline sends — victim ranking prompts, memory-update
//! prompts, attacker scaffolding, strategy snippets — lives in a named
//! template under `templates/`. The defaults are compiled in; a directory
//! override lets experiments swap texts without rebuilding. Placeholders are
//! `{identifier}` spans scanned in the template only: substituted values are
//! never re-scanned, so adversarial text cannot inject placeholders.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("unknown template {0:?}")]
    UnknownTemplate(String),
    #[error("template {template:?} uses placeholder {placeholder:?} but no value was provided")]
    MissingValue { template: String, placeholder: String },
    #[error("value provided for {placeholder:?} but template {template:?} never uses it")]
    UnusedValue { template: String, placeholder: String },
    #[error("reading template override {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Compiled-in defaults, name → text. File bytes are authoritative: no
/// trimming is applied, so templates control their own trailing newlines.
const BUILTIN: &[(&str, &str)] = &[
    ("rank_cf", include_str!("../../templates/rank_cf.txt")),
    ("rank_rag", include_str!("../../templates/rank_rag.txt")),
    ("rank_seq", include_str!("../../templates/rank_seq.txt")),
    ("rank_cf_candidate", include_str!("../../templates/rank_cf_candidate.txt")),
    ("rank_seq_candidate", include_str!("../../templates/rank_seq_candidate.txt")),
    ("rank_seq_history", include_str!("../../templates/rank_seq_history.txt")),
    ("rank_reprompt", include_str!("../../templates/rank_reprompt.txt")),
    ("target_output", include_str!("../../templates/target_output.txt")),
    ("benign_item_memory", include_str!("../../templates/benign_item_memory.txt")),
    ("benign_item_memory_bare", include_str!("../../templates/benign_item_memory_bare.txt")),
    ("user_update", include_str!("../../templates/user_update.txt")),
    ("item_update", include_str!("../../templates/item_update.txt")),
    ("update_nudge", include_str!("../../templates/update_nudge.txt")),
    ("event_item_update", include_str!("../../templates/event_item_update.txt")),
    ("event_user_update", include_str!("../../templates/event_user_update.txt")),
    ("general_user_memory", include_str!("../../templates/general_user_memory.txt")),
    ("probe_user_memory_1", include_str!("../../templates/probe_user_memory_1.txt")),
    ("probe_user_memory_2", include_str!("../../templates/probe_user_memory_2.txt")),
    ("trial_user_memories", include_str!("../../templates/trial_user_memories.txt")),
    ("attack_style", include_str!("../../templates/attack_style.txt")),
    ("attack_goal", include_str!("../../templates/attack_goal.txt")),
    ("attack_instruction", include_str!("../../templates/attack_instruction.txt")),
    ("attack_format", include_str!("../../templates/attack_format.txt")),
    ("trigger_seed", include_str!("../../templates/trigger_seed.txt")),
    ("trigger_polish", include_str!("../../templates/trigger_polish.txt")),
    ("memory_refine", include_str!("../../templates/memory_refine.txt")),
    ("paraphrase_defense", include_str!("../../templates/paraphrase_defense.txt")),
    ("strategy_fake_completion", include_str!("../../templates/strategy_fake_completion.txt")),
    ("strategy_context_switch", include_str!("../../templates/strategy_context_switch.txt")),
    ("strategy_goal_hijack", include_str!("../../templates/strategy_goal_hijack.txt")),
    ("strategy_malicious_task", include_str!("../../templates/strategy_malicious_task.txt")),
    ("strategy_payload", include_str!("../../templates/strategy_payload.txt")),
    ("strategy_special_tokens", include_str!("../../templates/strategy_special_tokens.txt")),
];

#[derive(Debug, Clone)]
pub struct TemplateSet {
    map: BTreeMap<String, String>,
}

impl TemplateSet {
    pub fn builtin() -> Self {
        TemplateSet {
            map: BUILTIN.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }

    /// Builtins with any `<name>.txt` files in `dir` layered on top.
    pub fn with_overrides(dir: &Path) -> Result<Self, TemplateError> {
        let mut set = Self::builtin();
        for name in BUILTIN.iter().map(|(k, _)| *k) {
            let path = dir.join(format!("{name}.txt"));
            if path.is_file() {
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| TemplateError::Io { path: path.display().to_string(), source: e })?;
                set.map.insert(name.to_string(), text);
            }
        }
        Ok(set)
    }

    pub fn raw(&self, name: &str) -> Result<&str, TemplateError> {
        self.map
            .get(name)
            .map(String::as_str)
            .ok_or_else(|| TemplateError::UnknownTemplate(name.to_string()))
    }

    /// Renders `name` with the given placeholder values. Strict in both
    /// directions: a placeholder without a value and a value without a
    /// placeholder are both errors, which catches template/caller drift.
    pub fn render(&self, name: &str, values: &[(&str, &str)]) -> Result<String, TemplateError> {
        let template = self.raw(name)?;
        let mut used: Vec<&str> = Vec::new();
        let mut out = String::with_capacity(template.len());
        let mut rest = template;
        while let Some(open) = rest.find('{') {
            out.push_str(&rest[..open]);
            let tail = &rest[open + 1..];
            match tail.find('}') {
                Some(close) if is_placeholder_name(&tail[..close]) => {
                    let key = &tail[..close];
                    match values.iter().find(|(k, _)| *k == key) {
                        Some((_, value)) => {
                            out.push_str(value);
                            if !used.contains(&key) {
                                used.push(key);
                            }
                        }
                        None => {
                            return Err(TemplateError::MissingValue {
                                template: name.to_string(),
                                placeholder: key.to_string(),
                            })
                        }
                    }
                    rest = &tail[close + 1..];
                }
                _ => {
                    out.push('{');
                    rest = tail;
                }
            }
        }
        out.push_str(rest);
        for (key, _) in values {
            if !used.contains(key) {
                return Err(TemplateError::UnusedValue {
                    template: name.to_string(),
                    placeholder: key.to_string(),
                });
            }
        }
        Ok(out)
    }

    /// The non-empty lines of a template — for templates that are lists
    /// (e.g. trial user memories).
    pub fn lines(&self, name: &str) -> Result<Vec<String>, TemplateError> {
        Ok(self
            .raw(name)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect())
    }
}

fn is_placeholder_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

/// Domain constants for the victim agents.
#[derive(Debug, Clone)]
pub struct AgentSettings {
    /// How many candidates a ranking prompt presents.
    pub candidate_count: usize,
    /// Minimum token coverage for a fuzzy title match when parsing rankings.
    pub fuzzy_threshold: f64,
    /// Longest purchase history rendered into a sequential prompt; older
    /// entries are dropped first.
    pub max_history_items: usize,
}

impl Default for AgentSettings {
    fn default() -> Self {
        AgentSettings { candidate_count: 10, fuzzy_threshold: 0.8, max_history_items: 10 }
    }
}

/// Benign item memory from catalog metadata: title plus categories when any
/// exist, title alone otherwise.
pub fn benign_item_memory(
    templates: &TemplateSet,
    title: &str,
    categories: &[String],
) -> Result<String, TemplateError> {
    if categories.is_empty() {
        templates.render("benign_item_memory_bare", &[("title", title)])
    } else {
        let joined = categories.join("; ");
        templates.render("benign_item_memory", &[("title", title), ("categories", &joined)])
    }
}
