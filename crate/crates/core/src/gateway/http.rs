//! OpenAI-compatible HTTP client.
//!
//! Generation goes through `POST {endpoint}/chat/completions`. Teacher-forced
//! scoring goes through `POST {endpoint}/completions` with `echo` +
//! `logprobs`, the shape vLLM-style servers expose; target-token NLLs are
//! recovered from the returned text offsets. Servers that omit logprobs make
//! `score_sequence` fail with [`GatewayError::LogprobsUnsupported`] rather
//! than silently degrading.

use std::io::Write;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendConfig, ChatExchange, GatewayError, LlmBackend, SequenceScore, Speaker};
use crate::textutil;

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: Option<String>,
}

#[derive(Serialize)]
struct CompletionRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    logprobs: u32,
    echo: bool,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    logprobs: Option<Logprobs>,
}

#[derive(Deserialize)]
struct Logprobs {
    token_logprobs: Vec<Option<f64>>,
    text_offset: Vec<usize>,
}

pub struct HttpBackend {
    config: BackendConfig,
    client: reqwest::blocking::Client,
    api_key: Option<String>,
    log: Option<Mutex<std::fs::File>>,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, GatewayError> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.request_timeout_secs))
            .build()
            .map_err(|e| GatewayError::InvalidConfig(format!("http client: {e}")))?;
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                GatewayError::InvalidConfig(format!("api key environment variable {var} is not set"))
            })?),
            None => None,
        };
        let log = match &config.log_requests {
            Some(path) => {
                let file = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| GatewayError::InvalidConfig(format!("request log {}: {e}", path.display())))?;
                Some(Mutex::new(file))
            }
            None => None,
        };
        Ok(HttpBackend { config, client, api_key, log })
    }

    fn post(&self, route: &str, body: &serde_json::Value) -> Result<serde_json::Value, GatewayError> {
        let url = format!("{}/{}", self.config.endpoint.trim_end_matches('/'), route);
        let mut request = self.client.post(&url).json(body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| GatewayError::Transport(e.to_string()))?;
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(GatewayError::Transport(format!("{url}: status {status}")));
        }
        if !status.is_success() {
            return Err(GatewayError::MalformedResponse(format!(
                "{url}: status {status}: {}",
                snippet(&text)
            )));
        }
        serde_json::from_str(&text)
            .map_err(|e| GatewayError::MalformedResponse(format!("{url}: invalid JSON ({e}): {}", snippet(&text))))
    }

    /// Appends one redacted request/response record to the JSONL log. The
    /// API key is never written; only its presence is recorded.
    fn log_call(&self, kind: &str, request: &serde_json::Value, outcome: &Result<String, String>) {
        let Some(log) = &self.log else { return };
        let record = serde_json::json!({
            "ts_ms": std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0),
            "role": self.config.role.as_str(),
            "endpoint": self.config.endpoint,
            "model": self.config.model_name,
            "kind": kind,
            "api_key": if self.api_key.is_some() { "<redacted>" } else { "<none>" },
            "request": request,
            "outcome": match outcome {
                Ok(text) => serde_json::json!({ "ok": text }),
                Err(err) => serde_json::json!({ "error": err }),
            },
        });
        if let Ok(mut file) = log.lock() {
            let _ = writeln!(file, "{record}");
        }
    }

    fn generate_once(&self, exchange: &ChatExchange) -> Result<String, GatewayError> {
        let request = ChatRequest {
            model: &self.config.model_name,
            messages: exchange
                .messages
                .iter()
                .map(|m| WireMessage {
                    role: match m.role {
                        Speaker::System => "system",
                        Speaker::User => "user",
                        Speaker::Assistant => "assistant",
                    },
                    content: &m.content,
                })
                .collect(),
            temperature: exchange.params.temperature.unwrap_or(self.config.temperature),
            max_tokens: exchange.params.max_tokens.unwrap_or(self.config.max_tokens),
            seed: exchange.params.seed.or(if self.config.seed != 0 { Some(self.config.seed) } else { None }),
        };
        let body = serde_json::to_value(&request)
            .map_err(|e| GatewayError::InvalidRequest(format!("serialising request: {e}")))?;
        let result = self.post("chat/completions", &body).and_then(|value| {
            let parsed: ChatResponse = serde_json::from_value(value)
                .map_err(|e| GatewayError::MalformedResponse(format!("chat response shape: {e}")))?;
            parsed
                .choices
                .into_iter()
                .next()
                .and_then(|c| c.message.content)
                .ok_or_else(|| GatewayError::MalformedResponse("response has no choices/content".into()))
        });
        self.log_call(
            "generate",
            &body,
            &result.as_ref().map(Clone::clone).map_err(|e| e.to_string()),
        );
        result
    }

    fn score_once(&self, prompt: &str, target: &str) -> Result<SequenceScore, GatewayError> {
        let full = format!("{prompt}{target}");
        let request = CompletionRequest {
            model: &self.config.model_name,
            prompt: &full,
            max_tokens: 0,
            temperature: 0.0,
            logprobs: 0,
            echo: true,
        };
        let body = serde_json::to_value(&request)
            .map_err(|e| GatewayError::InvalidRequest(format!("serialising request: {e}")))?;
        let result = self.post("completions", &body).and_then(|value| {
            let parsed: CompletionResponse = serde_json::from_value(value)
                .map_err(|e| GatewayError::MalformedResponse(format!("completion response shape: {e}")))?;
            let choice = parsed
                .choices
                .into_iter()
                .next()
                .ok_or_else(|| GatewayError::MalformedResponse("response has no choices".into()))?;
            let logprobs = choice.logprobs.ok_or(GatewayError::LogprobsUnsupported)?;
            if logprobs.token_logprobs.len() != logprobs.text_offset.len() {
                return Err(GatewayError::MalformedResponse(
                    "token_logprobs and text_offset lengths differ".into(),
                ));
            }
            // Tokens whose text offset falls inside the target span are the
            // teacher-forced continuation; sum their NLLs.
            let boundary = prompt.len();
            let mut per_token = Vec::new();
            for (offset, lp) in logprobs.text_offset.iter().zip(&logprobs.token_logprobs) {
                if *offset < boundary {
                    continue;
                }
                let lp = lp.ok_or_else(|| {
                    GatewayError::MalformedResponse("missing logprob for a target token".into())
                })?;
                per_token.push(-lp);
            }
            if per_token.is_empty() {
                return Err(GatewayError::MalformedResponse(
                    "no tokens aligned with the target span".into(),
                ));
            }
            Ok(SequenceScore::from_token_nlls(per_token))
        });
        self.log_call(
            "score",
            &body,
            &result
                .as_ref()
                .map(|s| format!("total_nll={}", s.total_nll))
                .map_err(|e| e.to_string()),
        );
        result
    }
}

impl LlmBackend for HttpBackend {
    fn generate(&self, exchange: &ChatExchange) -> Result<String, GatewayError> {
        exchange.validate()?;
        let tokens = exchange.token_count();
        if tokens > self.config.context_budget_tokens {
            return Err(GatewayError::ContextOverflow {
                tokens,
                budget: self.config.context_budget_tokens,
            });
        }
        super::with_retries(self.config.retry_limit, || self.generate_once(exchange))
    }

    fn score_sequence(&self, prompt: &str, target: &str) -> Result<SequenceScore, GatewayError> {
        if target.split_whitespace().next().is_none() {
            return Err(GatewayError::InvalidRequest("cannot score an empty target".into()));
        }
        let tokens = textutil::word_count(prompt) + textutil::word_count(target);
        if tokens > self.config.context_budget_tokens {
            return Err(GatewayError::ContextOverflow {
                tokens,
                budget: self.config.context_budget_tokens,
            });
        }
        super::with_retries(self.config.retry_limit, || self.score_once(prompt, target))
    }
}

fn snippet(text: &str) -> String {
    let mut s: String = text.chars().take(200).collect();
    if s.len() < text.len() {
        s.push('…');
    }
    s
}
