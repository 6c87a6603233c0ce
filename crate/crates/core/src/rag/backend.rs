use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{GenerationContext, RagConfig, RagError};
use crate::http::{self, InFlightLimit, JsonTransport, UreqTransport};

pub const ENV_ENDPOINT: &str = "PROMPTRAG_LLM_ENDPOINT";
pub const ENV_MODEL: &str = "PROMPTRAG_LLM_MODEL";
pub const ENV_API_KEY: &str = "PROMPTRAG_LLM_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// Outcome of a single backend call.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendFailure {
    Transient(String),
    Timeout,
    Rejected { status: u16, body: String },
    Malformed(String),
}

pub trait GenerationBackend: Send + Sync {
    fn id(&self) -> &str;
    fn generate_once(&self, ctx: &GenerationContext) -> Result<(String, Option<Usage>), BackendFailure>;
}

/// Offline backend returning the rendered context verbatim.
#[derive(Debug, Default)]
pub struct EchoBackend {
    fail_remaining: AtomicU32,
}

impl EchoBackend {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fails the first `n` calls with a transient error.
    pub fn failing_first(n: u32) -> Self {
        Self {
            fail_remaining: AtomicU32::new(n),
        }
    }
}

impl GenerationBackend for EchoBackend {
    fn id(&self) -> &str {
        "echo"
    }

    fn generate_once(&self, ctx: &GenerationContext) -> Result<(String, Option<Usage>), BackendFailure> {
        let failed = self
            .fail_remaining
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok();
        if failed {
            return Err(BackendFailure::Transient("injected failure".into()));
        }
        Ok((ctx.rendered.clone(), None))
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    content: Option<String>,
}

/// Client for an OpenAI-style `/chat/completions` endpoint.
pub struct ChatCompletionsBackend {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    temperature: f64,
    timeout: Duration,
    limit: InFlightLimit,
    transport: Arc<dyn JsonTransport>,
}

impl ChatCompletionsBackend {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
        cfg: &RagConfig,
        transport: Arc<dyn JsonTransport>,
    ) -> Result<Self, RagError> {
        let endpoint = endpoint.into();
        let model = model.into();
        if endpoint.trim().is_empty() {
            return Err(RagError::Config("endpoint is empty".into()));
        }
        if model.trim().is_empty() {
            return Err(RagError::Config("model is empty".into()));
        }
        Ok(Self {
            endpoint,
            model,
            api_key: api_key.filter(|k| !k.is_empty()),
            temperature: cfg.temperature,
            timeout: Duration::from_millis(cfg.timeout_ms),
            limit: InFlightLimit::new(cfg.max_in_flight),
            transport,
        })
    }

    /// Reads the endpoint, model and optional API key from the environment.
    pub fn from_env(cfg: &RagConfig) -> Result<Self, RagError> {
        Self::from_lookup(cfg, |k| std::env::var(k).ok(), Arc::new(UreqTransport::new()))
    }

    pub fn from_lookup(
        cfg: &RagConfig,
        lookup: impl Fn(&str) -> Option<String>,
        transport: Arc<dyn JsonTransport>,
    ) -> Result<Self, RagError> {
        let endpoint = lookup(ENV_ENDPOINT).ok_or_else(|| RagError::Config(format!("{ENV_ENDPOINT} is not set")))?;
        let model = lookup(ENV_MODEL).ok_or_else(|| RagError::Config(format!("{ENV_MODEL} is not set")))?;
        Self::new(endpoint, model, lookup(ENV_API_KEY), cfg, transport)
    }

    pub fn request_body(&self, ctx: &GenerationContext) -> serde_json::Value {
        json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [
                {"role": "system", "content": ctx.prompt_section},
                {"role": "user", "content": ctx.user_message()},
            ],
        })
    }
}

impl GenerationBackend for ChatCompletionsBackend {
    fn id(&self) -> &str {
        "chat-completions"
    }

    fn generate_once(&self, ctx: &GenerationContext) -> Result<(String, Option<Usage>), BackendFailure> {
        let mut headers = Vec::new();
        if let Some(k) = &self.api_key {
            headers.push(("Authorization".to_string(), format!("Bearer {k}")));
        }
        let body = self.request_body(ctx);
        let _slot = self.limit.acquire();
        let resp = self
            .transport
            .post_json(&self.endpoint, &headers, &body, self.timeout)
            .map_err(|e| match e {
                http::TransportError::Timeout => BackendFailure::Timeout,
                other => BackendFailure::Transient(other.to_string()),
            })?;
        if http::is_retryable_status(resp.status) {
            return Err(BackendFailure::Transient(format!("status {}", resp.status)));
        }
        if !(200..300).contains(&resp.status) {
            return Err(BackendFailure::Rejected {
                status: resp.status,
                body: resp.body,
            });
        }
        let parsed: ChatResponse =
            serde_json::from_str(&resp.body).map_err(|e| BackendFailure::Malformed(e.to_string()))?;
        let text = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendFailure::Malformed("no choices[0].message.content".into()))?;
        Ok((text, parsed.usage))
    }
}
