//! Deterministic offline backend.
//!
//! The mock is a pure function of `(seed, request)`: generation walks an
//! ordered rule table of `(matcher, action)` pairs and applies the first
//! match, scoring applies a configurable closed-form model. That makes every
//! downstream algorithm — ranking, memory updates, trigger search, strategy
//! optimisation — testable offline with exact expected values.
//!
//! Profiles (`"mock"` / `"mock:<profile>"` endpoints) bundle a rule table
//! with a score model:
//!
//! | profile      | generation                             | scoring             |
//! |--------------|----------------------------------------|---------------------|
//! | `default`    | full agent behaviour, promotion-biased | phrase-bias NLL     |
//! | `inverted`   | as default, reversed directive order   | phrase-bias NLL     |
//! | `stubborn`   | update prompts echo the old memory     | phrase-bias NLL     |
//! | `fluency`    | as default                             | char-bigram NLL     |
//! | `uniform256` | echo                                   | uniform, vocab 256  |
//! | `echo`       | echo                                   | uniform, vocab 16   |
//! | `flaky-<n>`  | as default after `n` transport errors  | phrase-bias NLL     |

use std::sync::atomic::{AtomicU32, Ordering};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::{BackendConfig, ChatExchange, GatewayError, LlmBackend, SequenceScore};
use crate::textutil;

/// The promotion phrase the default profiles react to, both in ranking
/// (candidates whose description contains it get boosted) and in scoring
/// (prompts containing it make the target output cheap). Tests and fixtures
/// rely on benign catalog text never containing it.
pub const PROMO_PHRASE: &str = "prime choice";

/// Marker that opens an injected task block in adversarial preambles.
pub const DIRECTIVE_OPEN: &str = "###";

/// Marker inside the keep-verbatim directive of adversarial preambles.
pub const DIRECTIVE_KEEP: &str = "word for word";

/// Canned refusal; contains both markers the drunk detector looks for.
pub const REFUSAL_TEXT: &str =
    "This description has already been completed and verified, so it cannot be rewritten, summarized, or updated.";

/// Request classification markers. Prompt templates embed these instruction
/// tails; the mock dispatches on them.
pub mod markers {
    pub const RANKING: &str = "Your output should be in the format: The sorted";
    pub const UPDATE: &str = "Respond with the updated memory only.";
    pub const SEED: &str = "Respond with one seed description only.";
    pub const SUMMARY: &str = "Respond with the summary only.";
    pub const REWRITE: &str = "Respond with the rewritten text only.";
    pub const PARAPHRASE: &str = "Respond with the paraphrase only.";
    pub const PAYLOAD: &str = "\nText:\n";
    pub const MEMORY_OPEN: &str = "Current memory:\n";
    pub const MEMORY_CLOSE: &str = "\n\nInteraction:";
    pub const CANDIDATE: &str = "CD title: ";
    pub const FEATURES: &str = ", where its features: ";
    pub const CANDIDATES_END: &str = "\n\nPlease sort";
    pub const FORMAT_PREFIX: &str = "Your output should be in the format: ";
}

/// Predicate over a rendered exchange.
#[derive(Debug)]
pub enum MockMatcher {
    Always,
    PromptContains(String),
    /// Memory-update request whose current-memory block contains `first`
    /// somewhere before `second` — the shape of an injected directive the
    /// profile "follows".
    MemoryDirective { first: String, second: String },
}

impl MockMatcher {
    fn matches(&self, rendered: &str) -> bool {
        match self {
            MockMatcher::Always => true,
            MockMatcher::PromptContains(needle) => rendered.contains(needle),
            MockMatcher::MemoryDirective { first, second } => {
                if !rendered.contains(markers::UPDATE) {
                    return false;
                }
                let Some(memory) = extract_memory_block(rendered) else {
                    return false;
                };
                match (memory.find(first.as_str()), memory.find(second.as_str())) {
                    (Some(a), Some(b)) => a < b,
                    _ => false,
                }
            }
        }
    }
}

/// How ranking requests order the extracted candidates.
#[derive(Debug, Clone)]
pub enum RankPolicy {
    /// Keep the presented order.
    PresentedOrder,
    /// Candidates whose description contains the phrase rise to the top,
    /// each group keeping its presented order.
    PhraseBoost(String),
    /// Deterministic shuffle keyed by (seed, prompt).
    SeededShuffle,
}

/// Response constructed when a rule fires.
#[derive(Debug)]
pub enum MockAction {
    /// Parse the candidate list and emit a sorted ranking in the requested
    /// format.
    RankCandidates(RankPolicy),
    /// Canned refusal (a "drunk" memory update).
    Refuse,
    /// Return the current-memory block verbatim (an update that silently
    /// changes nothing).
    EchoMemory,
    /// Rewrite the memory as its lead sentence plus a short note about the
    /// interaction. Deliberately answers in its "own words" rather than
    /// quoting the whole memory back, so text buried deep in a long memory
    /// does not leak into the response.
    AppendInteractionNote,
    /// Seed-description request: pick a canned template by the prompt's
    /// variation index and substitute the title.
    SeedFromTemplates,
    /// First sentence of the payload block.
    FirstSentenceOfPayload,
    /// Whitespace-normalised payload (a "polish" that changes nothing else).
    SquashPayload,
    /// Payload with a fixed synonym table applied (a lossy paraphrase).
    SynonymSwapPayload,
    FixedText(String),
    /// Last message content squashed to one line.
    EchoLast,
    /// Fail with a transport error while the counter is positive, then fall
    /// through to later rules. Models a recovering network.
    FailTransport(AtomicU32),
}

pub struct MockRule {
    pub matcher: MockMatcher,
    pub action: MockAction,
}

/// Closed-form scoring models for teacher-forced NLL.
#[derive(Debug, Clone)]
pub enum ScoreModel {
    /// Every target token costs `ln(vocab)`; perplexity is exactly `vocab`.
    Uniform { vocab: u32 },
    /// Per-token probabilities with a uniform fallback for unknown tokens.
    TokenProbs { probs: std::collections::BTreeMap<String, f64>, fallback_vocab: u32 },
    /// Every target token is cheap when the prompt contains the phrase and
    /// expensive otherwise. Additive in target length by construction.
    PromptPhraseBias { phrase: String, nll_present: f64, nll_absent: f64 },
    /// Character-level model: natural bigrams (common English pairs and
    /// space transitions) are cheap, everything else expensive. Shuffling a
    /// text's characters raises its perplexity.
    CharBigram { natural_nll: f64, rare_nll: f64 },
}

const COMMON_BIGRAMS: &[&str] = &[
    "th", "he", "in", "er", "an", "re", "on", "at", "en", "nd", "ti", "es", "or", "te", "of",
    "ed", "is", "it", "al", "ar", "st", "to", "nt", "ng", "se", "ha", "as", "ou", "io", "le",
    "ve", "co", "me", "de", "hi", "ri", "ro", "ic", "ne", "ea", "ra", "ce", "li", "ch", "ll",
    "be", "ma", "si", "om", "ur", "ta", "el", "la", "ns", "di", "fo", "ho", "pe", "ec", "pr",
];

impl ScoreModel {
    fn score(&self, prompt: &str, target: &str) -> SequenceScore {
        match self {
            ScoreModel::Uniform { vocab } => {
                let nll = f64::from(*vocab).ln();
                let tokens = textutil::word_count(target);
                SequenceScore::from_token_nlls(vec![nll; tokens])
            }
            ScoreModel::TokenProbs { probs, fallback_vocab } => {
                let fallback = f64::from(*fallback_vocab).ln();
                let nlls = textutil::words(target)
                    .into_iter()
                    .map(|tok| probs.get(&tok.to_lowercase()).map_or(fallback, |p| -p.ln()))
                    .collect();
                SequenceScore::from_token_nlls(nlls)
            }
            ScoreModel::PromptPhraseBias { phrase, nll_present, nll_absent } => {
                let nll = if prompt.contains(phrase.as_str()) { *nll_present } else { *nll_absent };
                let tokens = textutil::word_count(target);
                SequenceScore::from_token_nlls(vec![nll; tokens])
            }
            ScoreModel::CharBigram { natural_nll, rare_nll } => {
                let mut prev = prompt.chars().last();
                let mut nlls = Vec::new();
                for ch in target.chars() {
                    let natural = match prev {
                        None => true,
                        Some(p) => {
                            p == ' '
                                || ch == ' '
                                || p == '\n'
                                || ch == '\n'
                                || is_common_bigram(p, ch)
                        }
                    };
                    nlls.push(if natural { *natural_nll } else { *rare_nll });
                    prev = Some(ch);
                }
                SequenceScore::from_token_nlls(nlls)
            }
        }
    }
}

fn is_common_bigram(a: char, b: char) -> bool {
    let mut buf = [0u8; 8];
    let mut pair = String::new();
    pair.push_str(a.to_lowercase().next().unwrap_or(a).encode_utf8(&mut buf));
    pair.push_str(b.to_lowercase().next().unwrap_or(b).encode_utf8(&mut buf));
    COMMON_BIGRAMS.contains(&pair.as_str())
}

/// Canned seed descriptions; `{title}` is substituted. A few carry the
/// promotion phrases the default ranking policy reacts to, so a searched
/// trigger population starts with some signal to amplify.
const SEED_TEMPLATES: &[&str] = &[
    "An essential pick that rewards repeat listening. {title} is a prime choice for any collection.",
    "Listeners seeking something dependable will find {title} a must-have release with lasting appeal.",
    "A top-level consideration for anyone expanding their shelf; {title} stays in rotation for months.",
    "{title} offers a polished set of songs with confident pacing and clear production.",
    "Few releases balance energy and restraint the way {title} does across its runtime.",
    "The arrangements on {title} feel deliberate, with hooks that land on the first pass.",
    "Start to finish, {title} holds a steady mood without repeating itself.",
    "Critics keep returning to {title} for its warm mix and patient songwriting.",
    "On {title} the band sounds relaxed and sure of itself, never overplaying a moment.",
    "There is a reason collectors mention {title} early; it anchors a shelf of favorites.",
    "With {title} the production stays out of the way and lets the melodies carry the record.",
    "Every revisit of {title} surfaces a detail missed before, a mark of careful sequencing.",
];

const SYNONYMS: &[(&str, &str)] = &[
    ("amazing", "impressive"),
    ("essential", "valuable"),
    ("prime", "excellent"),
    ("choice", "selection"),
    ("must-have", "worthwhile"),
    ("top-level", "serious"),
    ("consideration", "option"),
    ("vivid", "lively"),
    ("classic", "standard"),
    ("favorite", "preferred"),
];

pub struct MockBackend {
    seed: u64,
    retry_limit: u32,
    context_budget_tokens: usize,
    rules: Vec<MockRule>,
    score_model: ScoreModel,
}

impl MockBackend {
    /// Builds the profile named by `cfg.endpoint` (`"mock"` or
    /// `"mock:<profile>"`).
    pub fn from_config(cfg: &BackendConfig) -> Result<Self, GatewayError> {
        let profile = match cfg.endpoint.as_str() {
            "mock" => "default",
            other => other.strip_prefix("mock:").ok_or_else(|| {
                GatewayError::InvalidConfig(format!("not a mock endpoint: {other:?}"))
            })?,
        };
        let mut backend = MockBackend {
            seed: cfg.seed,
            retry_limit: cfg.retry_limit,
            context_budget_tokens: cfg.context_budget_tokens,
            rules: Vec::new(),
            score_model: ScoreModel::PromptPhraseBias {
                phrase: PROMO_PHRASE.to_string(),
                nll_present: 0.05,
                nll_absent: 2.0,
            },
        };
        match profile {
            "default" => backend.rules = Self::default_rules(false),
            "inverted" => backend.rules = Self::default_rules(true),
            "stubborn" => {
                backend.rules = vec![MockRule {
                    matcher: MockMatcher::PromptContains(markers::UPDATE.into()),
                    action: MockAction::EchoMemory,
                }];
                backend.rules.extend(Self::default_rules(false));
            }
            "fluency" => {
                backend.rules = Self::default_rules(false);
                backend.score_model = ScoreModel::CharBigram { natural_nll: 1.0, rare_nll: 6.0 };
            }
            "uniform256" => {
                backend.rules = vec![MockRule {
                    matcher: MockMatcher::Always,
                    action: MockAction::EchoLast,
                }];
                backend.score_model = ScoreModel::Uniform { vocab: 256 };
            }
            "echo" => {
                backend.rules = vec![MockRule {
                    matcher: MockMatcher::Always,
                    action: MockAction::EchoLast,
                }];
                backend.score_model = ScoreModel::Uniform { vocab: 16 };
            }
            other => {
                if let Some(n) = other.strip_prefix("flaky-").and_then(|n| n.parse::<u32>().ok()) {
                    backend.rules = vec![MockRule {
                        matcher: MockMatcher::Always,
                        action: MockAction::FailTransport(AtomicU32::new(n)),
                    }];
                    backend.rules.extend(Self::default_rules(false));
                } else {
                    return Err(GatewayError::InvalidConfig(format!("unknown mock profile {other:?}")));
                }
            }
        }
        Ok(backend)
    }

    /// Bare backend for unit tests: explicit rules and score model.
    pub fn with_rules(seed: u64, rules: Vec<MockRule>, score_model: ScoreModel) -> Self {
        MockBackend {
            seed,
            retry_limit: 0,
            context_budget_tokens: super::default_context_budget(),
            rules,
            score_model,
        }
    }

    fn default_rules(inverted_directive: bool) -> Vec<MockRule> {
        let (first, second) = if inverted_directive {
            (DIRECTIVE_KEEP, DIRECTIVE_OPEN)
        } else {
            (DIRECTIVE_OPEN, DIRECTIVE_KEEP)
        };
        vec![
            MockRule {
                matcher: MockMatcher::PromptContains(markers::RANKING.into()),
                action: MockAction::RankCandidates(RankPolicy::PhraseBoost(PROMO_PHRASE.into())),
            },
            MockRule {
                matcher: MockMatcher::MemoryDirective { first: first.into(), second: second.into() },
                action: MockAction::Refuse,
            },
            MockRule {
                matcher: MockMatcher::PromptContains(markers::UPDATE.into()),
                action: MockAction::AppendInteractionNote,
            },
            MockRule {
                matcher: MockMatcher::PromptContains(markers::SEED.into()),
                action: MockAction::SeedFromTemplates,
            },
            MockRule {
                matcher: MockMatcher::PromptContains(markers::SUMMARY.into()),
                action: MockAction::FirstSentenceOfPayload,
            },
            MockRule {
                matcher: MockMatcher::PromptContains(markers::REWRITE.into()),
                action: MockAction::SquashPayload,
            },
            MockRule {
                matcher: MockMatcher::PromptContains(markers::PARAPHRASE.into()),
                action: MockAction::SynonymSwapPayload,
            },
            MockRule { matcher: MockMatcher::Always, action: MockAction::EchoLast },
        ]
    }

    fn generate_once(&self, exchange: &ChatExchange) -> Result<String, GatewayError> {
        exchange.validate()?;
        let tokens = exchange.token_count();
        if tokens > self.context_budget_tokens {
            return Err(GatewayError::ContextOverflow { tokens, budget: self.context_budget_tokens });
        }
        let rendered = exchange.rendered();
        for rule in &self.rules {
            if !rule.matcher.matches(&rendered) {
                continue;
            }
            match &rule.action {
                MockAction::FailTransport(remaining) => {
                    let fired = remaining
                        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
                        .is_ok();
                    if fired {
                        return Err(GatewayError::Transport("mock transport failure".into()));
                    }
                    // Budget exhausted: behave like the rest of the table.
                }
                action => return self.apply(action, &rendered, exchange),
            }
        }
        Ok(textutil::squash_whitespace(exchange.last_content()))
    }

    fn apply(
        &self,
        action: &MockAction,
        rendered: &str,
        exchange: &ChatExchange,
    ) -> Result<String, GatewayError> {
        match action {
            MockAction::RankCandidates(policy) => self.rank(rendered, policy),
            MockAction::Refuse => Ok(REFUSAL_TEXT.to_string()),
            MockAction::EchoMemory => extract_memory_block(rendered)
                .map(str::to_string)
                .ok_or_else(|| GatewayError::InvalidRequest("no memory block in update prompt".into())),
            MockAction::AppendInteractionNote => {
                let memory = extract_memory_block(rendered).ok_or_else(|| {
                    GatewayError::InvalidRequest("no memory block in update prompt".into())
                })?;
                let event = extract_event_block(rendered).unwrap_or("an interaction");
                let note = textutil::sentence_slices(event)
                    .into_iter()
                    .next()
                    .unwrap_or_else(|| "an interaction.".to_string());
                let lead = textutil::sentence_slices(memory)
                    .into_iter()
                    .next()
                    .unwrap_or_else(|| memory.trim().to_string());
                Ok(format!("{lead} Noted: {note}"))
            }
            MockAction::SeedFromTemplates => {
                let index = variation_index(rendered).unwrap_or(0);
                let title = quoted_title(rendered).unwrap_or_else(|| "this CD".to_string());
                let template = SEED_TEMPLATES[index % SEED_TEMPLATES.len()];
                let mut text = template.replace("{title}", &title);
                if index >= SEED_TEMPLATES.len() {
                    text.push_str(&format!(" Take {index} keeps the claim intact."));
                }
                Ok(text)
            }
            MockAction::FirstSentenceOfPayload => {
                let payload = extract_payload(rendered).ok_or_else(|| {
                    GatewayError::InvalidRequest("no payload block in prompt".into())
                })?;
                Ok(textutil::sentence_slices(payload)
                    .into_iter()
                    .next()
                    .unwrap_or_else(|| textutil::squash_whitespace(payload)))
            }
            MockAction::SquashPayload => {
                let payload = extract_payload(rendered).ok_or_else(|| {
                    GatewayError::InvalidRequest("no payload block in prompt".into())
                })?;
                Ok(textutil::squash_whitespace(payload))
            }
            MockAction::SynonymSwapPayload => {
                let payload = extract_payload(rendered).ok_or_else(|| {
                    GatewayError::InvalidRequest("no payload block in prompt".into())
                })?;
                let swapped = textutil::words(payload)
                    .into_iter()
                    .map(|word| {
                        let stripped = word.trim_matches(|c: char| !c.is_alphanumeric());
                        for (from, to) in SYNONYMS {
                            if stripped.eq_ignore_ascii_case(from) {
                                return word.replace(stripped, to);
                            }
                        }
                        word.to_string()
                    })
                    .collect::<Vec<_>>()
                    .join(" ");
                Ok(swapped)
            }
            MockAction::FixedText(text) => Ok(text.clone()),
            MockAction::EchoLast => Ok(textutil::squash_whitespace(exchange.last_content())),
            MockAction::FailTransport(_) => unreachable!("handled by the rule loop"),
        }
    }

    fn rank(&self, rendered: &str, policy: &RankPolicy) -> Result<String, GatewayError> {
        let candidates = extract_candidates(rendered);
        if candidates.is_empty() {
            return Err(GatewayError::InvalidRequest("ranking prompt without candidate list".into()));
        }
        let header = rendered
            .find(markers::FORMAT_PREFIX)
            .map(|at| {
                let rest = &rendered[at + markers::FORMAT_PREFIX.len()..];
                rest.lines().next().unwrap_or("The sorted CDs are:").to_string()
            })
            .unwrap_or_else(|| "The sorted CDs are:".to_string());
        let mut order: Vec<usize> = (0..candidates.len()).collect();
        match policy {
            RankPolicy::PresentedOrder => {}
            RankPolicy::PhraseBoost(phrase) => {
                order.sort_by_key(|&i| if candidates[i].memory.contains(phrase.as_str()) { 0 } else { 1 });
            }
            RankPolicy::SeededShuffle => {
                let mut bytes = Vec::with_capacity(8 + rendered.len());
                bytes.extend_from_slice(&self.seed.to_le_bytes());
                bytes.extend_from_slice(rendered.as_bytes());
                let mut rng = ChaCha20Rng::seed_from_u64(textutil::fnv1a64(&bytes));
                order.shuffle(&mut rng);
            }
        }
        let mut out = header;
        for (rank, &idx) in order.iter().enumerate() {
            out.push('\n');
            out.push_str(&format!("{}. {}", rank + 1, candidates[idx].title));
        }
        out.push('\n');
        Ok(out)
    }
}

impl LlmBackend for MockBackend {
    fn generate(&self, exchange: &ChatExchange) -> Result<String, GatewayError> {
        super::with_retries(self.retry_limit, || self.generate_once(exchange))
    }

    fn score_sequence(&self, prompt: &str, target: &str) -> Result<SequenceScore, GatewayError> {
        if target.split_whitespace().next().is_none() {
            return Err(GatewayError::InvalidRequest("cannot score an empty target".into()));
        }
        let tokens = textutil::word_count(prompt) + textutil::word_count(target);
        if tokens > self.context_budget_tokens {
            return Err(GatewayError::ContextOverflow { tokens, budget: self.context_budget_tokens });
        }
        Ok(self.score_model.score(prompt, target))
    }
}

/// A candidate block parsed out of a ranking prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptCandidate {
    pub title: String,
    pub memory: String,
}

/// Extracts `(title, description)` pairs from a ranking prompt. Descriptions
/// may span multiple lines (adversarial ones do), so blocks are delimited by
/// the next title marker or the end-of-list marker rather than by newlines.
pub fn extract_candidates(rendered: &str) -> Vec<PromptCandidate> {
    let mut starts: Vec<usize> = Vec::new();
    let mut from = 0usize;
    while let Some(pos) = rendered[from..].find(markers::CANDIDATE) {
        starts.push(from + pos);
        from += pos + markers::CANDIDATE.len();
    }
    let mut out = Vec::new();
    for (i, &start) in starts.iter().enumerate() {
        let body_start = start + markers::CANDIDATE.len();
        let end = if i + 1 < starts.len() {
            starts[i + 1]
        } else {
            rendered[body_start..]
                .find(markers::CANDIDATES_END)
                .map(|p| body_start + p)
                .unwrap_or(rendered.len())
        };
        let block = &rendered[body_start..end];
        let Some(sep) = block.find(markers::FEATURES) else {
            continue;
        };
        let title = block[..sep].trim().to_string();
        let memory = block[sep + markers::FEATURES.len()..].trim_end().to_string();
        if !title.is_empty() {
            out.push(PromptCandidate { title, memory });
        }
    }
    out
}

/// The current-memory block of an update prompt.
pub fn extract_memory_block(rendered: &str) -> Option<&str> {
    let start = rendered.find(markers::MEMORY_OPEN)? + markers::MEMORY_OPEN.len();
    let end = rendered[start..].find(markers::MEMORY_CLOSE)? + start;
    Some(&rendered[start..end])
}

/// The interaction block of an update prompt.
pub fn extract_event_block(rendered: &str) -> Option<&str> {
    let open = "Interaction:\n";
    let start = rendered.find(open)? + open.len();
    let end = rendered[start..].find("\n\n").map(|p| start + p).unwrap_or(rendered.len());
    Some(rendered[start..end].trim())
}

/// The working text of an auxiliary prompt (below its last `Text:` marker,
/// above the trailing instruction).
pub fn extract_payload(rendered: &str) -> Option<&str> {
    let start = rendered.rfind(markers::PAYLOAD)? + markers::PAYLOAD.len();
    let tail = &rendered[start..];
    let end = tail.rfind("\n\nRespond with").unwrap_or(tail.len());
    Some(tail[..end].trim())
}

fn variation_index(rendered: &str) -> Option<usize> {
    let at = rendered.find("Variation ")?;
    let digits: String = rendered[at + "Variation ".len()..]
        .chars()
        .take_while(|c| c.is_ascii_digit())
        .collect();
    digits.parse().ok()
}

fn quoted_title(rendered: &str) -> Option<String> {
    let marker = "titled \"";
    let start = rendered.find(marker)? + marker.len();
    let end = rendered[start..].find('"')? + start;
    Some(rendered[start..end].to_string())
}
