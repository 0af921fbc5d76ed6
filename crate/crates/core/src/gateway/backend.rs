//! Completion backend abstraction and the JSON-over-HTTP client.
//!
//! One request per sample, `logprobs: true` on the wire, so per-sample
//! token log-probabilities are unambiguous. Transport errors and 5xx
//! responses are retried with exponential backoff; everything else fails
//! immediately.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Result, UqError};

/// Env var holding the bearer token for HTTP backends.
pub const ENV_API_KEY: &str = "UQ_API_KEY";
/// Env var holding the endpoint base URL for HTTP backends.
pub const ENV_API_BASE: &str = "UQ_API_BASE";

/// One completion request; `sample_index` distinguishes repeated draws for
/// the same context/query (the mock backend keys on it).
#[derive(Debug, Clone)]
pub struct CompletionRequest {
    pub context_id: String,
    pub query: String,
    pub image_ref: Option<String>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub sample_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

/// Raw backend reply before gateway-side validation.
#[derive(Debug, Clone)]
pub struct Completion {
    pub text: String,
    pub token_logprobs: Option<Vec<f64>>,
    pub finish_reason: FinishReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackendKind {
    Http,
    Mock,
}

/// A completion backend. Implementations must be safe to call from
/// multiple worker threads at once.
pub trait CompletionBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion>;
    fn kind(&self) -> BackendKind;
}

/// Retry schedule for transient failures.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            initial_backoff: Duration::from_millis(250),
        }
    }
}

/// OpenAI-compatible chat/completions client.
pub struct HttpBackend {
    agent: ureq::Agent,
    base_url: String,
    api_key: Option<String>,
    model: String,
    retry: RetryPolicy,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        HttpBackend {
            agent: ureq::AgentBuilder::new()
                .timeout(Duration::from_secs(120))
                .build(),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: None,
            model: model.into(),
            retry: RetryPolicy::default(),
        }
    }

    /// Reads `UQ_API_BASE` / `UQ_API_KEY`; the env base overrides `base_url`.
    pub fn from_env(base_url: Option<&str>, model: impl Into<String>) -> Result<Self> {
        let base = match std::env::var(ENV_API_BASE) {
            Ok(v) if !v.is_empty() => v,
            _ => base_url
                .map(str::to_string)
                .ok_or_else(|| {
                    UqError::InvalidConfig(format!(
                        "no backend endpoint: pass --backend or set {ENV_API_BASE}"
                    ))
                })?,
        };
        let mut backend = HttpBackend::new(base, model);
        if let Ok(key) = std::env::var(ENV_API_KEY) {
            if !key.is_empty() {
                backend.api_key = Some(key);
            }
        }
        Ok(backend)
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn request_body(&self, request: &CompletionRequest) -> serde_json::Value {
        let content = match &request.image_ref {
            Some(image) => json!([
                { "type": "text", "text": request.query },
                { "type": "image_url", "image_url": { "url": image } }
            ]),
            None => json!(request.query),
        };
        json!({
            "model": self.model,
            "messages": [ { "role": "user", "content": content } ],
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
            "logprobs": true,
        })
    }

    fn send_once(&self, body: &serde_json::Value) -> std::result::Result<serde_json::Value, SendError> {
        let url = format!("{}/chat/completions", self.base_url);
        let mut req = self
            .agent
            .post(&url)
            .set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        match req.send_json(body.clone()) {
            Ok(resp) => resp
                .into_json::<serde_json::Value>()
                .map_err(|e| SendError::Fatal(format!("invalid response body: {e}"))),
            Err(ureq::Error::Status(code, resp)) => {
                let text = resp.into_string().unwrap_or_default();
                let msg = format!("HTTP {code}: {}", text.chars().take(200).collect::<String>());
                if (500..600).contains(&code) {
                    Err(SendError::Transient(msg))
                } else {
                    Err(SendError::Fatal(msg))
                }
            }
            Err(ureq::Error::Transport(t)) => Err(SendError::Transient(t.to_string())),
        }
    }

    fn parse_response(value: &serde_json::Value) -> Result<Completion> {
        let choice = value
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| UqError::BackendUnavailable("response has no choices".into()))?;
        let text = choice
            .pointer("/message/content")
            .and_then(|v| v.as_str())
            .unwrap_or_default()
            .to_string();
        let token_logprobs = choice
            .pointer("/logprobs/content")
            .and_then(|v| v.as_array())
            .map(|entries| {
                entries
                    .iter()
                    .filter_map(|e| e.get("logprob").and_then(|l| l.as_f64()))
                    .collect::<Vec<f64>>()
            })
            .filter(|v| !v.is_empty());
        let finish_reason = match choice.get("finish_reason").and_then(|v| v.as_str()) {
            Some("stop") => FinishReason::Stop,
            Some("length") => FinishReason::Length,
            None => FinishReason::Stop,
            Some(_) => FinishReason::Error,
        };
        Ok(Completion {
            text,
            token_logprobs,
            finish_reason,
        })
    }
}

enum SendError {
    Transient(String),
    Fatal(String),
}

impl CompletionBackend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion> {
        let body = self.request_body(request);
        let mut backoff = self.retry.initial_backoff;
        let mut last_err = String::new();
        for attempt in 0..self.retry.attempts.max(1) {
            if attempt > 0 {
                std::thread::sleep(backoff);
                backoff *= 2;
            }
            match self.send_once(&body) {
                Ok(value) => return Self::parse_response(&value),
                Err(SendError::Transient(msg)) => last_err = msg,
                Err(SendError::Fatal(msg)) => return Err(UqError::BackendUnavailable(msg)),
            }
        }
        Err(UqError::BackendUnavailable(format!(
            "{} attempts exhausted: {last_err}",
            self.retry.attempts
        )))
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }
}
