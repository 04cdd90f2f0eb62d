//! Client for chat-completion HTTP endpoints.

use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine as _;
use offemma_core::prompting::PromptBundle;
use serde_json::{json, Value};
use tracing::{debug, warn};

use crate::{BackendError, BackendKind, VlmBackend, VlmRequest, VlmResponse};

pub const API_KEY_ENV: &str = "OFFEMMA_API_KEY";

/// Retries apply to timeouts, connection failures and 5xx statuses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff: Duration::from_millis(500),
            max_backoff: Duration::from_secs(2),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): doubling, capped.
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry).unwrap_or(u32::MAX);
        self.initial_backoff.saturating_mul(factor).min(self.max_backoff)
    }
}

#[derive(Debug, Clone)]
pub struct HttpConfig {
    /// Full URL of the chat-completion route.
    pub endpoint: String,
    pub timeout: Duration,
    pub retry: RetryPolicy,
    /// Bearer token; usually read from [`API_KEY_ENV`].
    pub api_key: Option<String>,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout: Duration::from_secs(120),
            retry: RetryPolicy::default(),
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        }
    }
}

pub struct HttpBackend {
    cfg: HttpConfig,
    client: reqwest::blocking::Client,
    calls: AtomicU64,
    retries: AtomicU64,
}

enum Attempt {
    Retry(BackendError),
    Fatal(BackendError),
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| BackendError::InvalidConfig(format!("http client: {e}")))?;
        Ok(Self {
            cfg,
            client,
            calls: AtomicU64::new(0),
            retries: AtomicU64::new(0),
        })
    }

    /// HTTP requests attempted so far, retries included.
    pub fn network_calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::SeqCst)
    }

    fn user_content(text: String, request: &VlmRequest, with_images: bool) -> Value {
        let mut parts = vec![json!({"type": "text", "text": text})];
        if with_images {
            for img in &request.images {
                let data = base64::engine::general_purpose::STANDARD.encode(&img.bytes);
                parts.push(json!({
                    "type": "image_url",
                    "image_url": {"url": format!("data:{};base64,{data}", img.mime)}
                }));
            }
        }
        Value::Array(parts)
    }

    fn body(request: &VlmRequest, messages: &[Value]) -> Value {
        json!({
            "model": request.model_id,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        })
    }

    fn attempt(&self, body: &Value) -> Result<String, Attempt> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut req = self.client.post(&self.cfg.endpoint).json(body);
        if let Some(key) = &self.cfg.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                Attempt::Retry(BackendError::Timeout)
            } else {
                Attempt::Retry(BackendError::EndpointUnreachable {
                    endpoint: self.cfg.endpoint.clone(),
                    reason: e.to_string(),
                })
            }
        })?;
        let status = resp.status();
        if status.is_server_error() {
            return Err(Attempt::Retry(BackendError::BadStatus(status.as_u16())));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(BackendError::BadStatus(status.as_u16())));
        }
        let value: Value = resp.json().map_err(|e| {
            if e.is_timeout() {
                Attempt::Retry(BackendError::Timeout)
            } else {
                Attempt::Fatal(BackendError::MalformedResponse(e.to_string()))
            }
        })?;
        let text = value
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| Attempt::Fatal(BackendError::MalformedResponse("missing choices[0].message.content".into())))?;
        if text.is_empty() {
            return Err(Attempt::Fatal(BackendError::EmptyReply));
        }
        Ok(text.to_string())
    }

    fn post(&self, body: &Value, retries: &mut u32) -> Result<String, BackendError> {
        let mut retry = 0;
        loop {
            match self.attempt(body) {
                Ok(text) => {
                    *retries += retry;
                    return Ok(text);
                }
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) if retry < self.cfg.retry.max_retries => {
                    let wait = self.cfg.retry.backoff(retry);
                    warn!(error = %e, retry = retry + 1, wait_ms = wait.as_millis() as u64, "retrying request");
                    self.retries.fetch_add(1, Ordering::SeqCst);
                    thread::sleep(wait);
                    retry += 1;
                }
                Err(Attempt::Retry(e)) => return Err(e),
            }
        }
    }
}

impl VlmBackend for HttpBackend {
    fn complete(&self, request: &VlmRequest) -> Result<VlmResponse, BackendError> {
        let start = Instant::now();
        let prompt = &request.prompt;
        let mut retries = 0;
        let mut messages = vec![json!({"role": "system", "content": prompt.system_preamble})];
        let text = if request.multi_turn {
            let mut replies = Vec::with_capacity(prompt.stages.len());
            for (i, stage) in prompt.stages.iter().enumerate() {
                let user = PromptBundle::render_stage(i, stage);
                messages.push(json!({"role": "user", "content": Self::user_content(user, request, i == 0)}));
                let reply = self.post(&Self::body(request, &messages), &mut retries)?;
                messages.push(json!({"role": "assistant", "content": reply}));
                replies.push(reply);
            }
            replies.join("\n\n")
        } else {
            messages.push(json!({"role": "user", "content": Self::user_content(prompt.render_user(), request, true)}));
            self.post(&Self::body(request, &messages), &mut retries)?
        };
        debug!(sample = request.sample_index, "http completion received");
        Ok(VlmResponse {
            text,
            latency_s: start.elapsed().as_secs_f64(),
            backend: BackendKind::Http,
            cache_hit: false,
            retries,
        })
    }

    fn kind(&self) -> BackendKind {
        BackendKind::Http
    }
}
