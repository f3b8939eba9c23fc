//! Uniform access to chat-completion backends.
//!
//! Three agent roles (victim, surrogate, auxiliary) sit behind one
//! [`LlmBackend`] trait so the rest of the pipeline never cares whether a
//! call goes to an OpenAI-compatible server ([`http::HttpBackend`]) or to the
//! deterministic offline mock ([`mock::MockBackend`]). Backends are selected
//! by the `endpoint` field of [`BackendConfig`]: an `http(s)://` URL picks
//! the HTTP client, `"mock"` (optionally `"mock:<profile>"`) picks the mock.

pub mod http;
pub mod mock;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::textutil;

/// Which seat a backend occupies in an attack run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// The recommender under attack. Sampled greedily (temperature 0) so
    /// ranking outputs are reproducible.
    Victim,
    /// The attacker's own scoring model; must expose target token
    /// log-probabilities.
    Surrogate,
    /// Helper model for rewriting: seed generation, polish, paraphrase.
    Auxiliary,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Victim => "victim",
            Role::Surrogate => "surrogate",
            Role::Auxiliary => "auxiliary",
        }
    }
}

fn default_max_tokens() -> u32 {
    512
}

fn default_timeout_secs() -> u64 {
    60
}

fn default_retry_limit() -> u32 {
    2
}

fn default_context_budget() -> usize {
    8192
}

/// Connection and sampling settings for one backend seat.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub role: Role,
    /// `http(s)://…` for a live server, `"mock"` or `"mock:<profile>"` for
    /// the offline backend.
    pub endpoint: String,
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout_secs")]
    pub request_timeout_secs: u64,
    /// Extra attempts after the first on transport failures.
    #[serde(default = "default_retry_limit")]
    pub retry_limit: u32,
    #[serde(default)]
    pub seed: u64,
    /// Upper bound on prompt + target tokens; requests over budget fail
    /// loudly instead of being truncated.
    #[serde(default = "default_context_budget")]
    pub context_budget_tokens: usize,
    /// Name of the environment variable holding the API key, if any. The key
    /// itself never appears in configs or logs.
    #[serde(default)]
    pub api_key_env: Option<String>,
    /// When set, every request/response pair is appended as JSONL to this
    /// file (with credentials redacted).
    #[serde(default)]
    pub log_requests: Option<std::path::PathBuf>,
}

impl BackendConfig {
    /// Offline backend with library defaults for the given seat.
    pub fn mock(role: Role, seed: u64) -> Self {
        BackendConfig {
            role,
            endpoint: "mock".to_string(),
            model_name: "mock".to_string(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            request_timeout_secs: default_timeout_secs(),
            retry_limit: default_retry_limit(),
            seed,
            context_budget_tokens: default_context_budget(),
            api_key_env: None,
            log_requests: None,
        }
    }

    /// Same, but selecting a named mock profile (`"mock:<profile>"`).
    pub fn mock_profile(role: Role, seed: u64, profile: &str) -> Self {
        let mut cfg = Self::mock(role, seed);
        cfg.endpoint = format!("mock:{profile}");
        cfg
    }

    pub fn is_mock(&self) -> bool {
        self.endpoint == "mock" || self.endpoint.starts_with("mock:")
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.endpoint.is_empty() {
            return Err(GatewayError::InvalidConfig("endpoint must not be empty".into()));
        }
        if !self.is_mock() && !self.endpoint.starts_with("http://") && !self.endpoint.starts_with("https://") {
            return Err(GatewayError::InvalidConfig(format!(
                "endpoint must be an http(s) URL or a mock name, got {:?}",
                self.endpoint
            )));
        }
        if self.model_name.is_empty() {
            return Err(GatewayError::InvalidConfig("model_name must not be empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidConfig(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.role == Role::Victim && self.temperature != 0.0 {
            return Err(GatewayError::InvalidConfig(
                "victim backends must sample greedily (temperature 0) so rankings are reproducible".into(),
            ));
        }
        if self.context_budget_tokens == 0 {
            return Err(GatewayError::InvalidConfig("context_budget_tokens must be positive".into()));
        }
        Ok(())
    }
}

/// Speaker of one chat message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Speaker,
    pub content: String,
}

/// Per-request sampling knobs; `None` fields fall back to the backend config.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub seed: Option<u64>,
}

/// One generation request: ordered messages plus sampling parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatExchange {
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub params: SamplingParams,
}

impl ChatExchange {
    /// Single system-message exchange, the shape every agent prompt uses.
    pub fn system(content: impl Into<String>) -> Self {
        ChatExchange {
            messages: vec![ChatMessage { role: Speaker::System, content: content.into() }],
            params: SamplingParams::default(),
        }
    }

    pub fn push(&mut self, role: Speaker, content: impl Into<String>) {
        self.messages.push(ChatMessage { role, content: content.into() });
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("exchange has no messages".into()));
        }
        if self.messages.iter().any(|m| m.content.trim().is_empty()) {
            return Err(GatewayError::InvalidRequest("exchange contains an empty message".into()));
        }
        Ok(())
    }

    /// Role-tagged flat rendering; the mock hashes this, logs record it.
    pub fn rendered(&self) -> String {
        let mut out = String::new();
        for msg in &self.messages {
            let tag = match msg.role {
                Speaker::System => "system",
                Speaker::User => "user",
                Speaker::Assistant => "assistant",
            };
            out.push_str(tag);
            out.push_str(": ");
            out.push_str(&msg.content);
            out.push('\n');
        }
        out
    }

    /// Content of the last user message, if any (else the last message).
    pub fn last_content(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Speaker::User)
            .or_else(|| self.messages.last())
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }

    pub fn token_count(&self) -> usize {
        self.messages.iter().map(|m| textutil::word_count(&m.content)).sum()
    }
}

/// Teacher-forced score of a target continuation under a model.
///
/// `total_nll` is the raw sum of per-token negative log-likelihoods — no
/// length normalisation — so scores of concatenated targets add up.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub total_nll: f64,
    pub per_token_nll: Vec<f64>,
    pub token_count: usize,
}

impl SequenceScore {
    pub fn from_token_nlls(per_token_nll: Vec<f64>) -> Self {
        let total_nll = per_token_nll.iter().sum();
        let token_count = per_token_nll.len();
        SequenceScore { total_nll, per_token_nll, token_count }
    }

    /// The maximisation objective used by the trigger search: higher is a
    /// more likely target.
    pub fn score(&self) -> f64 {
        -self.total_nll
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("prompt of {tokens} tokens exceeds the context budget of {budget}")]
    ContextOverflow { tokens: usize, budget: usize },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("backend does not expose target log-probabilities")]
    LogprobsUnsupported,
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl GatewayError {
    /// Transport failures are the only retryable class.
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Transport(_))
    }
}

/// One seat's model access. Implementations retry transport failures
/// internally up to their configured `retry_limit`; callers see the final
/// outcome only.
pub trait LlmBackend: Send + Sync {
    /// Free-form generation.
    fn generate(&self, exchange: &ChatExchange) -> Result<String, GatewayError>;

    /// Teacher-forced NLL of `target` given `prompt`. Only meaningful for
    /// backends that expose token log-probabilities.
    fn score_sequence(&self, prompt: &str, target: &str) -> Result<SequenceScore, GatewayError>;

    /// Perplexity of standalone text: `exp(total_nll / token_count)` with an
    /// empty prompt.
    fn perplexity(&self, text: &str) -> Result<f64, GatewayError> {
        if text.split_whitespace().next().is_none() {
            return Err(GatewayError::InvalidRequest("perplexity of empty text is undefined".into()));
        }
        let scored = self.score_sequence("", text)?;
        if scored.token_count == 0 {
            return Err(GatewayError::MalformedResponse("scoring returned zero tokens".into()));
        }
        Ok((scored.total_nll / scored.token_count as f64).exp())
    }
}

/// Builds the backend selected by `cfg.endpoint`.
pub fn build_backend(cfg: &BackendConfig) -> Result<Arc<dyn LlmBackend>, GatewayError> {
    cfg.validate()?;
    if cfg.is_mock() {
        Ok(Arc::new(mock::MockBackend::from_config(cfg)?))
    } else {
        Ok(Arc::new(http::HttpBackend::new(cfg.clone())?))
    }
}

/// Runs `attempt` up to `1 + retry_limit` times, retrying only transport
/// failures. Non-retryable errors and successes return immediately.
pub fn with_retries<T>(
    retry_limit: u32,
    mut attempt: impl FnMut() -> Result<T, GatewayError>,
) -> Result<T, GatewayError> {
    let mut tries = 0u32;
    loop {
        match attempt() {
            Ok(value) => return Ok(value),
            Err(err) if err.is_retryable() && tries < retry_limit => {
                tries += 1;
                log::warn!("transport failure (attempt {tries}/{retry_limit} retries): {err}");
            }
            Err(err) => return Err(err),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn victim_config_rejects_nonzero_temperature() {
        let mut cfg = BackendConfig::mock(Role::Victim, 1);
        assert!(cfg.validate().is_ok());
        cfg.temperature = 0.7;
        assert!(matches!(cfg.validate(), Err(GatewayError::InvalidConfig(_))));
        // Same temperature is fine for the auxiliary seat.
        let mut aux = BackendConfig::mock(Role::Auxiliary, 1);
        aux.temperature = 0.7;
        assert!(aux.validate().is_ok());
    }

    #[test]
    fn endpoint_grammar_is_enforced() {
        let mut cfg = BackendConfig::mock(Role::Surrogate, 1);
        cfg.endpoint = "ftp://nope".into();
        assert!(cfg.validate().is_err());
        cfg.endpoint = "mock:fluency".into();
        assert!(cfg.validate().is_ok());
        cfg.endpoint = "https://api.example.com/v1".into();
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn retries_stop_at_the_limit() {
        let mut calls = 0u32;
        let result: Result<(), _> = with_retries(2, || {
            calls += 1;
            Err(GatewayError::Transport("down".into()))
        });
        assert!(result.is_err());
        assert_eq!(calls, 3, "one initial try plus two retries");
    }

    #[test]
    fn retries_do_not_touch_non_transport_errors() {
        let mut calls = 0u32;
        let result: Result<(), _> = with_retries(5, || {
            calls += 1;
            Err(GatewayError::MalformedResponse("bad json".into()))
        });
        assert!(result.is_err());
        assert_eq!(calls, 1);
    }

    #[test]
    fn retries_recover_within_budget() {
        let mut calls = 0u32;
        let result = with_retries(2, || {
            calls += 1;
            if calls < 3 {
                Err(GatewayError::Transport("flaky".into()))
            } else {
                Ok(calls)
            }
        });
        assert_eq!(result.unwrap(), 3);
    }

    #[test]
    fn score_totals_match_token_sums() {
        let s = SequenceScore::from_token_nlls(vec![0.5, 0.25, 1.0]);
        assert_eq!(s.token_count, 3);
        assert!((s.total_nll - 1.75).abs() < 1e-12);
        assert!((s.score() + 1.75).abs() < 1e-12);
    }
}
