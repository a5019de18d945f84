//! Live client for OpenAI-compatible chat-completions endpoints.

use std::sync::Arc;
use std::time::Duration;

use chrono::Utc;
use serde::Deserialize;
use serde_json::{json, Value};

use super::{
    with_retries, BackendError, GenerationBackend, GenerationRequest, RetryPolicy, Semaphore,
    DEFAULT_IN_FLIGHT_CAP,
};
use crate::records::{DecodingPolicy, GenerationRecord};

/// Environment variable consulted for the bearer token when the config does
/// not carry one.
pub const API_KEY_ENV: &str = "UQD_API_KEY";

#[derive(Debug, Clone)]
pub struct LiveConfig {
    /// Endpoint base; `/v1/chat/completions` is appended.
    pub base_url: String,
    /// Model name sent in every request body.
    pub model: String,
    /// Bearer token; falls back to `UQD_API_KEY`, and anonymous when neither
    /// is set.
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    pub in_flight_cap: usize,
}

impl LiveConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        LiveConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key: None,
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
            in_flight_cap: DEFAULT_IN_FLIGHT_CAP,
        }
    }
}

/// The exact JSON body for a chat-completions call.
///
/// Kept as a pure function so the wire format is testable without a server.
/// Greedy maps to temperature 0.0; beam search has no chat-completions
/// encoding and is rejected rather than silently approximated.
pub fn chat_completion_body(
    model: &str,
    request: &GenerationRequest,
) -> Result<Value, BackendError> {
    let mut messages = Vec::new();
    if let Some(system) = &request.system_text {
        messages.push(json!({"content": system, "role": "system"}));
    }
    messages.push(json!({"content": request.prompt_text, "role": "user"}));

    let mut body = serde_json::Map::new();
    body.insert("max_tokens".into(), json!(request.max_tokens));
    body.insert("messages".into(), json!(messages));
    body.insert("model".into(), json!(model));
    body.insert("n".into(), json!(1));
    match &request.policy {
        DecodingPolicy::Greedy { .. } => {
            body.insert("temperature".into(), json!(0.0));
        }
        DecodingPolicy::Temperature { temperature, .. } => {
            body.insert("temperature".into(), json!(temperature));
        }
        DecodingPolicy::TopK { k, .. } => {
            body.insert("top_k".into(), json!(k));
        }
        DecodingPolicy::TopP { p, .. } => {
            body.insert("top_p".into(), json!(p));
        }
        DecodingPolicy::Beam { .. } => {
            return Err(BackendError::UnsupportedPolicy {
                backend_id: request.backend_id.clone(),
                policy: request.policy.kind(),
                reason: "beam search is not expressible over the chat-completions protocol; \
                         use a local backend"
                    .into(),
            });
        }
    }
    if let Some(seed) = request.policy.seed() {
        body.insert("seed".into(), json!(seed));
    }
    if request.want_logprobs {
        body.insert("logprobs".into(), json!(true));
    }
    Ok(Value::Object(body))
}

#[derive(Debug, Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChoiceMessage,
    #[serde(default)]
    logprobs: Option<LogprobBlock>,
}

#[derive(Debug, Deserialize)]
struct ChoiceMessage {
    content: String,
}

#[derive(Debug, Deserialize)]
struct LogprobBlock {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Debug, Deserialize)]
struct TokenLogprob {
    logprob: f64,
}

pub struct LiveBackend {
    id: String,
    config: LiveConfig,
    client: reqwest::blocking::Client,
    semaphore: Arc<Semaphore>,
}

impl LiveBackend {
    pub fn new(id: impl Into<String>, config: LiveConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Config(format!("cannot build http client: {e}")))?;
        let semaphore = Arc::new(Semaphore::new(config.in_flight_cap.max(1)));
        Ok(LiveBackend {
            id: id.into(),
            config,
            client,
            semaphore,
        })
    }

    fn bearer_token(&self) -> Option<String> {
        self.config
            .api_key
            .clone()
            .or_else(|| std::env::var(API_KEY_ENV).ok())
            .filter(|k| !k.is_empty())
    }

    fn endpoint(&self) -> String {
        format!(
            "{}/v1/chat/completions",
            self.config.base_url.trim_end_matches('/')
        )
    }

    fn attempt(&self, body: &Value) -> Result<ChatResponse, BackendError> {
        let url = self.endpoint();
        let mut builder = self.client.post(&url).json(body);
        if let Some(token) = self.bearer_token() {
            builder = builder.bearer_auth(token);
        }
        let response = builder
            .send()
            .map_err(|e| BackendError::Transport(format!("POST {url}: {e}")))?;
        let status = response.status();
        if status.as_u16() == 429 {
            let body = response.text().unwrap_or_default();
            return Err(BackendError::RateLimited(body));
        }
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            return Err(BackendError::Http {
                status: status.as_u16(),
                body,
            });
        }
        response
            .json()
            .map_err(|e| BackendError::Protocol(format!("undecodable completion: {e}")))
    }
}

impl GenerationBackend for LiveBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn generate(&self, request: &GenerationRequest) -> Result<GenerationRecord, BackendError> {
        let body = chat_completion_body(&self.config.model, request)?;
        let _permit = self.semaphore.acquire();
        let response = with_retries(&self.config.retry, || self.attempt(&body))?;
        let choice = response
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| BackendError::Protocol("completion has no choices".into()))?;
        let token_logprobs = match choice.logprobs.and_then(|b| b.content) {
            Some(tokens) if request.want_logprobs => {
                Some(tokens.into_iter().map(|t| t.logprob).collect())
            }
            _ => None,
        };
        Ok(GenerationRecord {
            prompt_id: String::new(),
            variant_key: String::new(),
            text: choice.message.content,
            token_logprobs,
            backend_id: request.backend_id.clone(),
            policy: request.policy.clone(),
            timestamp: Utc::now(),
        })
    }
}
