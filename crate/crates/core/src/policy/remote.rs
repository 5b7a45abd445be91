//! OpenAI-compatible chat-completions backend.
//!
//! Requests go to `POST {endpoint}/v1/chat/completions`. When the server
//! understands vLLM's `guided_choice` extension the label list is sent along
//! and decoding is constrained server-side; the client still maps every
//! completion onto the label space so the contract holds for any server.

use std::sync::Arc;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{closest_label, map_completion, LabelMatch, Policy, PredictRequest, Prediction, Role};
use crate::data::LabelSpace;
use crate::error::{Error, Result, TransportError};
use crate::rng::StreamRng;

pub const ENV_ENDPOINT: &str = "ICRL_ENDPOINT";
pub const ENV_API_KEY: &str = "ICRL_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InvalidOutputPolicy {
    /// Ask once more, then fall back to prefix matching.
    #[default]
    ResampleOnce,
    PrefixMatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    /// Base URL, e.g. `http://localhost:8000`. Falls back to `ICRL_ENDPOINT`.
    #[serde(default)]
    pub endpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    #[serde(default)]
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    /// Send vLLM's `guided_choice` with the label list.
    #[serde(default = "default_true")]
    pub guided_choice: bool,
    /// Send the answer prefix as a partial assistant turn for the server to continue.
    #[serde(default)]
    pub continue_final_message: bool,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub invalid_output: InvalidOutputPolicy,
}

fn default_temperature() -> f64 {
    1.0
}
fn default_max_tokens() -> u32 {
    16
}
fn default_true() -> bool {
    true
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_timeout_secs() -> u64 {
    60
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            api_key: None,
            model: String::new(),
            temperature: default_temperature(),
            max_tokens: default_max_tokens(),
            guided_choice: true,
            continue_final_message: false,
            max_retries: default_max_retries(),
            backoff_ms: default_backoff_ms(),
            timeout_secs: default_timeout_secs(),
            invalid_output: InvalidOutputPolicy::default(),
        }
    }
}

impl RemoteConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.endpoint.trim().is_empty() {
            errs.push(format!("backend.endpoint is required (or set {ENV_ENDPOINT})"));
        }
        if self.model.trim().is_empty() {
            errs.push("backend.model is required".into());
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            errs.push(format!(
                "backend.temperature must be in [0, 2], got {}",
                self.temperature
            ));
        }
        if self.max_tokens == 0 {
            errs.push("backend.max_tokens must be ≥ 1".into());
        }
        errs
    }

    pub fn url(&self) -> String {
        format!("{}/v1/chat/completions", self.endpoint.trim_end_matches('/'))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
    pub retry_after: Option<u64>,
}

/// Blocking JSON POST. Errors are connection-level failures only; HTTP error
/// statuses come back as responses.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
    ) -> std::result::Result<HttpResponse, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { agent }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new(Duration::from_secs(default_timeout_secs()))
    }
}

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &Value,
    ) -> std::result::Result<HttpResponse, String> {
        let mut req = self.agent.post(url);
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let mut resp = req.send_json(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let retry_after = resp
            .headers()
            .get("retry-after")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.trim().parse().ok());
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpResponse {
            status,
            body,
            retry_after,
        })
    }
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Debug, Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Debug, Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Debug, Deserialize, Default)]
struct Usage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

struct Completion {
    text: String,
    prompt_tokens: u64,
    completion_tokens: u64,
}

pub struct RemoteChat {
    config: RemoteConfig,
    transport: Arc<dyn Transport>,
    sleep: fn(Duration),
}

impl RemoteChat {
    pub fn new(config: RemoteConfig, transport: Arc<dyn Transport>) -> Self {
        Self {
            config,
            transport,
            sleep: std::thread::sleep,
        }
    }

    #[cfg(test)]
    fn without_sleep(mut self) -> Self {
        self.sleep = |_| {};
        self
    }

    pub fn request_body(&self, req: &PredictRequest<'_>, labels: &LabelSpace, seed: u64) -> Value {
        let mut messages: Vec<Value> = req
            .transcript
            .messages
            .iter()
            .map(|m| json!({ "role": m.role, "content": m.content }))
            .collect();
        let mut body = json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
            "seed": seed,
        });
        if self.config.continue_final_message {
            messages.push(json!({ "role": Role::Assistant, "content": req.transcript.answer_prefix }));
            body["continue_final_message"] = json!(true);
            body["add_generation_prompt"] = json!(false);
        }
        body["messages"] = Value::Array(messages);
        if self.config.guided_choice {
            body["guided_choice"] = json!(labels.labels());
        }
        body
    }

    fn send(&self, body: &Value) -> std::result::Result<Completion, TransportError> {
        let mut headers = vec![("Content-Type".to_string(), "application/json".to_string())];
        if let Some(key) = self.config.api_key.as_deref().filter(|k| !k.is_empty()) {
            headers.push(("Authorization".into(), format!("Bearer {key}")));
        }
        let url = self.config.url();
        let mut attempts = 0;
        loop {
            attempts += 1;
            let (status, retry_after, message, retryable) = match self.transport.post_json(&url, &headers, body) {
                Ok(resp) if (200..300).contains(&resp.status) => {
                    let parsed: CompletionResponse = serde_json::from_str(&resp.body).map_err(|e| TransportError {
                        attempts,
                        status: Some(resp.status),
                        retry_after: None,
                        message: format!("malformed completion response: {e}"),
                    })?;
                    let usage = parsed.usage.unwrap_or_default();
                    let text = parsed
                        .choices
                        .into_iter()
                        .next()
                        .and_then(|c| c.message.content)
                        .unwrap_or_default();
                    return Ok(Completion {
                        text,
                        prompt_tokens: usage.prompt_tokens,
                        completion_tokens: usage.completion_tokens,
                    });
                }
                Ok(resp) => {
                    let retryable = resp.status == 429 || resp.status >= 500;
                    let snippet: String = resp.body.chars().take(200).collect();
                    (
                        Some(resp.status),
                        resp.retry_after,
                        format!("HTTP {}: {snippet}", resp.status),
                        retryable,
                    )
                }
                Err(e) => (None, None, e, true),
            };
            if !retryable || attempts > self.config.max_retries {
                return Err(TransportError {
                    attempts,
                    status,
                    retry_after,
                    message,
                });
            }
            let backoff = retry_after.map(Duration::from_secs).unwrap_or_else(|| {
                Duration::from_millis(self.config.backoff_ms.saturating_mul(1 << (attempts - 1).min(10)))
            });
            tracing::warn!(
                attempts,
                ?status,
                "chat completion failed, retrying in {backoff:?}: {message}"
            );
            (self.sleep)(backoff);
        }
    }
}

impl Policy for RemoteChat {
    fn predict(&self, req: &PredictRequest<'_>, labels: &LabelSpace, rng: &mut StreamRng) -> Result<Prediction> {
        let max_asks = match self.config.invalid_output {
            InvalidOutputPolicy::ResampleOnce => 2,
            InvalidOutputPolicy::PrefixMatch => 1,
        };
        let mut prompt_tokens = 0;
        let mut completion_tokens = 0;
        for ask in 1..=max_asks {
            let body = self.request_body(req, labels, rng.random());
            let c = self.send(&body).map_err(Error::Transport)?;
            prompt_tokens += c.prompt_tokens;
            completion_tokens += c.completion_tokens;
            let matched = map_completion(&c.text, labels, &req.transcript.answer_prefix);
            let last = c.text;
            let label = match matched {
                LabelMatch::Exact(l) | LabelMatch::Prefix(l) => Some((l, false)),
                LabelMatch::Truncated(l) if ask == max_asks => Some((l, true)),
                LabelMatch::Invalid if ask == max_asks => Some((closest_label(&last, labels), true)),
                _ => None,
            };
            if let Some((label, invalid_output)) = label {
                return Ok(Prediction {
                    label,
                    raw_text: last,
                    prompt_tokens,
                    completion_tokens,
                    invalid_output,
                });
            }
        }
        unreachable!("final ask always maps to a label")
    }

    fn is_remote(&self) -> bool {
        true
    }
}
