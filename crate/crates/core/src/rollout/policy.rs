//! Policy endpoints.
//!
//! The rollout loop only needs "messages in, text out". [`ChatCompletionsClient`]
//! speaks the OpenAI-compatible `/chat/completions` protocol (vLLM, SGLang,
//! hosted APIs); the mocks in [`super::mock`] implement the same trait.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Message;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub max_tokens: usize,
    pub stop_sequences: Vec<String>,
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRequest {
    pub messages: Vec<Message>,
    pub sampling: Sampling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedToken {
    pub token_id: Option<u32>,
    pub logprob: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FinishReason {
    /// Hit EOS or one of the stop sequences.
    Stop,
    Length,
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyReply {
    pub text: String,
    pub tokens: Option<Vec<GeneratedToken>>,
    pub finish_reason: FinishReason,
}

impl PolicyReply {
    pub fn text(text: impl Into<String>) -> Self {
        PolicyReply { text: text.into(), tokens: None, finish_reason: FinishReason::Stop }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("policy endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("policy endpoint returned HTTP {status}: {body}")]
    Http { status: u16, body: String },
    /// The endpoint refused the request because the context is too long.
    #[error("context exceeds the policy's window: {0}")]
    ContextOverflow(String),
    #[error("malformed policy reply: {0}")]
    Malformed(String),
}

impl PolicyError {
    pub fn is_retryable(&self) -> bool {
        match self {
            PolicyError::Unreachable(_) => true,
            PolicyError::Http { status, .. } => *status == 429 || *status >= 500,
            PolicyError::ContextOverflow(_) | PolicyError::Malformed(_) => false,
        }
    }
}

/// A chat-style generation endpoint. Implementations must be safe to call
/// from many rollouts at once.
pub trait PolicyEndpoint: Send + Sync {
    fn generate(&self, request: &PolicyRequest) -> Result<PolicyReply, PolicyError>;
}

impl<P: PolicyEndpoint + ?Sized> PolicyEndpoint for &P {
    fn generate(&self, request: &PolicyRequest) -> Result<PolicyReply, PolicyError> {
        (**self).generate(request)
    }
}

impl<P: PolicyEndpoint + ?Sized> PolicyEndpoint for Box<P> {
    fn generate(&self, request: &PolicyRequest) -> Result<PolicyReply, PolicyError> {
        (**self).generate(request)
    }
}

/// Client for an OpenAI-compatible chat completions server.
#[derive(Debug, Clone)]
pub struct ChatCompletionsClient {
    base_url: String,
    model: String,
    api_key: Option<String>,
    request_logprobs: bool,
    http: reqwest::blocking::Client,
}

impl ChatCompletionsClient {
    /// `base_url` is the API root, e.g. `http://localhost:8000/v1`.
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Result<Self, PolicyError> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(600))
            .build()
            .map_err(|e| PolicyError::Unreachable(e.to_string()))?;
        Ok(ChatCompletionsClient {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key: None,
            request_logprobs: false,
            http,
        })
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key;
        self
    }

    /// Ask for per-token logprobs (needed for token logs and masking).
    pub fn with_logprobs(mut self, on: bool) -> Self {
        self.request_logprobs = on;
        self
    }

    pub fn request_body(&self, request: &PolicyRequest) -> serde_json::Value {
        let messages: Vec<serde_json::Value> = request
            .messages
            .iter()
            .map(|m| serde_json::json!({ "role": m.role.as_str(), "content": m.text }))
            .collect();
        let mut body = serde_json::json!({
            "model": self.model,
            "messages": messages,
            "temperature": request.sampling.temperature,
            "max_tokens": request.sampling.max_tokens,
            "stop": request.sampling.stop_sequences,
        });
        if let Some(seed) = request.sampling.seed {
            body["seed"] = seed.into();
        }
        if self.request_logprobs {
            body["logprobs"] = true.into();
        }
        body
    }
}

fn looks_like_context_overflow(body: &str) -> bool {
    let lower = body.to_ascii_lowercase();
    ["context length", "context_length", "maximum context", "too many tokens", "prompt is too long"]
        .iter()
        .any(|needle| lower.contains(needle))
}

/// `"token_id:123"` strings (vLLM's `return_tokens_as_token_ids`) carry ids.
fn token_id_from(token: &str) -> Option<u32> {
    token.strip_prefix("token_id:").and_then(|s| s.parse().ok())
}

pub fn parse_chat_completion(body: &serde_json::Value) -> Result<PolicyReply, PolicyError> {
    let choice = body
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| PolicyError::Malformed("no choices".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(|c| c.as_str())
        .unwrap_or_default()
        .to_string();
    let finish_reason = match choice.get("finish_reason").and_then(|f| f.as_str()) {
        Some("stop") | None => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        Some(other) => FinishReason::Other(other.to_string()),
    };
    let tokens = choice.pointer("/logprobs/content").and_then(|c| c.as_array()).map(|items| {
        items
            .iter()
            .map(|item| GeneratedToken {
                token_id: item.get("token").and_then(|t| t.as_str()).and_then(token_id_from),
                logprob: item.get("logprob").and_then(|l| l.as_f64()).unwrap_or(f64::NAN),
            })
            .collect()
    });
    Ok(PolicyReply { text, tokens, finish_reason })
}

impl PolicyEndpoint for ChatCompletionsClient {
    fn generate(&self, request: &PolicyRequest) -> Result<PolicyReply, PolicyError> {
        let mut call = self.http.post(format!("{}/chat/completions", self.base_url)).json(&self.request_body(request));
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let resp = call.send().map_err(|e| PolicyError::Unreachable(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| PolicyError::Unreachable(e.to_string()))?;
        if !status.is_success() {
            if status.as_u16() == 400 && looks_like_context_overflow(&text) {
                return Err(PolicyError::ContextOverflow(text));
            }
            return Err(PolicyError::Http { status: status.as_u16(), body: text });
        }
        let body: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| PolicyError::Malformed(e.to_string()))?;
        parse_chat_completion(&body)
    }
}
