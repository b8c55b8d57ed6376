//! Generic chat-completion HTTP backend with transcript caching and retries.

use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::transcript::{now_ms, TranscriptEntry, TranscriptStore};
use super::{BackendError, ModelBackend, ModelRequest, ModelResponse, Provenance};

/// Endpoint settings. The token itself is read from `auth_env` at
/// construction and never serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API token.
    #[serde(default)]
    pub auth_env: Option<String>,
    #[serde(default = "default_auth_header")]
    pub auth_header: String,
    #[serde(default = "default_auth_prefix")]
    pub auth_prefix: String,
    #[serde(default = "default_true")]
    pub use_cache: bool,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_auth_header() -> String {
    "Authorization".into()
}
fn default_auth_prefix() -> String {
    "Bearer ".into()
}
fn default_true() -> bool {
    true
}
fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    /// Exponential delay before retry number `retry` (1-based), with full jitter
    /// over the upper half of the window.
    pub fn delay(&self, retry: u32) -> Duration {
        let exp = self
            .base_delay_ms
            .saturating_mul(1u64 << (retry.saturating_sub(1)).min(20))
            .min(self.max_delay_ms);
        let jitter = if exp > 1 {
            rand::rng().random_range(0..=exp / 2)
        } else {
            0
        };
        Duration::from_millis(exp / 2 + jitter)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpReply {
    pub status: u16,
    pub body: String,
}

/// Minimal POST surface so tests can script upstream behaviour.
pub trait HttpTransport: Send + Sync {
    fn post_json(&self, url: &str, headers: &[(String, String)], body: &str) -> Result<HttpReply, String>;
}

pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new(timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { agent }
    }
}

impl HttpTransport for UreqTransport {
    fn post_json(&self, url: &str, headers: &[(String, String)], body: &str) -> Result<HttpReply, String> {
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let mut resp = req.send(body).map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        Ok(HttpReply { status, body })
    }
}

type Sleeper = Arc<dyn Fn(Duration) + Send + Sync>;

pub struct HttpBackend {
    config: HttpConfig,
    token: Option<String>,
    transport: Box<dyn HttpTransport>,
    store: Arc<TranscriptStore>,
    retry: RetryPolicy,
    sleeper: Sleeper,
}

const BODY_SNIPPET: usize = 512;

impl HttpBackend {
    /// Builds the backend, reading the token from the configured env var.
    pub fn new(config: HttpConfig, store: Arc<TranscriptStore>, retry: RetryPolicy) -> Result<Self, BackendError> {
        let token = match &config.auth_env {
            Some(var) => Some(
                std::env::var(var)
                    .map_err(|_| BackendError::Config(format!("environment variable {var} is not set")))?,
            ),
            None => None,
        };
        let transport = Box::new(UreqTransport::new(Duration::from_secs(config.timeout_secs)));
        Ok(Self::with_transport(config, token, transport, store, retry))
    }

    pub fn with_transport(
        config: HttpConfig,
        token: Option<String>,
        transport: Box<dyn HttpTransport>,
        store: Arc<TranscriptStore>,
        retry: RetryPolicy,
    ) -> Self {
        Self {
            config,
            token,
            transport,
            store,
            retry,
            sleeper: Arc::new(std::thread::sleep),
        }
    }

    /// Replaces the sleep used between retries (tests pass a no-op).
    pub fn with_sleeper(mut self, sleeper: impl Fn(Duration) + Send + Sync + 'static) -> Self {
        self.sleeper = Arc::new(sleeper);
        self
    }

    /// The chat-completion wire message: one user turn, text then inline
    /// base64 images.
    pub fn encode_request(&self, request: &ModelRequest) -> Value {
        let mut content = vec![json!({"type": "text", "text": request.prompt})];
        for img in &request.images {
            content.push(json!({
                "type": "image_url",
                "image_url": {"url": format!("data:{};base64,{}", img.media_type, img.to_base64())}
            }));
        }
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": request.sampling.temperature,
            "max_tokens": request.sampling.max_output_tokens,
        });
        if let Some(seed) = request.sampling.seed {
            body["seed"] = json!(seed);
        }
        body
    }

    fn headers(&self) -> Vec<(String, String)> {
        match &self.token {
            Some(t) => vec![(
                self.config.auth_header.clone(),
                format!("{}{}", self.config.auth_prefix, t),
            )],
            None => vec![],
        }
    }
}

/// Text of the first candidate: OpenAI-style `choices[0].message.content`
/// (string or content parts) or `candidates[0].content.parts[*].text`.
pub fn extract_text(body: &str) -> Result<String, BackendError> {
    let v: Value = serde_json::from_str(body).map_err(|e| BackendError::Malformed(format!("invalid JSON: {e}")))?;
    if let Some(content) = v.pointer("/choices/0/message/content") {
        if let Some(s) = content.as_str() {
            return Ok(s.to_string());
        }
        if let Some(parts) = content.as_array() {
            return Ok(join_parts(parts));
        }
    }
    if let Some(parts) = v.pointer("/candidates/0/content/parts").and_then(Value::as_array) {
        return Ok(join_parts(parts));
    }
    Err(BackendError::Malformed("no candidate text in reply".into()))
}

fn join_parts(parts: &[Value]) -> String {
    parts
        .iter()
        .filter_map(|p| p.get("text").and_then(Value::as_str))
        .collect::<Vec<_>>()
        .join("")
}

fn truncate(s: &str) -> String {
    s.chars().take(BODY_SNIPPET).collect()
}

impl ModelBackend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}@{}", self.config.model, self.config.endpoint)
    }

    fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, BackendError> {
        request.validate()?;
        let hash = request.hash()?;
        if self.config.use_cache {
            if let Some(hit) = self.store.lookup(&hash) {
                return Ok(ModelResponse {
                    text: hit.response_text,
                    latency_ms: hit.latency_ms,
                    provenance: Provenance::Cache,
                    attempts: 0,
                });
            }
        }
        let body = self.encode_request(request).to_string();
        let headers = self.headers();
        let max = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let started = Instant::now();
            let outcome = self.transport.post_json(&self.config.endpoint, &headers, &body);
            let latency_ms = started.elapsed().as_millis() as u64;
            let err = match outcome {
                Ok(reply) if (200..300).contains(&reply.status) => {
                    let text = extract_text(&reply.body)?;
                    self.store.append(TranscriptEntry {
                        request_hash: hash,
                        role: request.role,
                        model_id: self.config.model.clone(),
                        response_text: text.clone(),
                        latency_ms,
                        timestamp_ms: Some(now_ms()),
                    })?;
                    return Ok(ModelResponse {
                        text,
                        latency_ms,
                        provenance: Provenance::Live,
                        attempts: attempt,
                    });
                }
                Ok(reply) if reply.status == 429 => BackendError::RateLimited { attempts: attempt },
                Ok(reply) => BackendError::Transport {
                    status: Some(reply.status),
                    message: truncate(&reply.body),
                    attempts: attempt,
                },
                Err(message) => BackendError::Transport {
                    status: None,
                    message: truncate(&message),
                    attempts: attempt,
                },
            };
            let retryable = match &err {
                BackendError::Transport { status: Some(s), .. } => *s >= 500,
                other => other.is_retryable(),
            };
            if !retryable || attempt >= max {
                log::error!("{} call failed after {attempt} attempt(s): {err}", request.role);
                return Err(err);
            }
            let delay = self.retry.delay(attempt);
            log::warn!(
                "{} call attempt {attempt}/{max} failed ({err}); retrying in {delay:?}",
                request.role
            );
            (self.sleeper)(delay);
        }
    }
}
