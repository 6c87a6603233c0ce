use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{EmbedError, Embedder, EmbedderConfig, Embedding, Query, StyleTag};
use crate::http::{self, Attempt, InFlightLimit, JsonTransport, RetryPolicy, UreqTransport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExternalConfig {
    pub endpoint: Option<String>,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub retry: RetryPolicy,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            timeout_ms: 10_000,
            max_in_flight: 4,
            retry: super::default_retry(),
        }
    }
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    input: Vec<&'a str>,
    dimension: usize,
}

#[derive(Deserialize)]
struct EmbedResponse {
    embeddings: Vec<Vec<f64>>,
}

/// Client for an embedding service speaking
/// `{"input": [..], "dimension": d}` → `{"embeddings": [[..], ..]}`.
pub struct ExternalProvider {
    dim: usize,
    endpoint: String,
    timeout: Duration,
    retry: RetryPolicy,
    limit: InFlightLimit,
    config_hash: u64,
    transport: Arc<dyn JsonTransport>,
}

impl ExternalProvider {
    pub fn new(cfg: &EmbedderConfig) -> Result<Self, EmbedError> {
        Self::with_transport(cfg, Arc::new(UreqTransport::new()))
    }

    pub fn with_transport(cfg: &EmbedderConfig, transport: Arc<dyn JsonTransport>) -> Result<Self, EmbedError> {
        cfg.validate()?;
        let endpoint = cfg
            .external
            .endpoint
            .clone()
            .filter(|e| !e.is_empty())
            .ok_or_else(|| EmbedError::InvalidConfig("external provider needs an endpoint".into()))?;
        Ok(Self {
            dim: cfg.dimension,
            endpoint,
            timeout: Duration::from_millis(cfg.external.timeout_ms),
            retry: cfg.external.retry,
            limit: InFlightLimit::new(cfg.external.max_in_flight),
            config_hash: cfg.config_hash(),
            transport,
        })
    }

    fn request(&self, inputs: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let body = serde_json::to_value(EmbedRequest {
            input: inputs.to_vec(),
            dimension: self.dim,
        })
        .map_err(|e| EmbedError::ProviderUnavailable(e.to_string()))?;
        let _slot = self.limit.acquire();
        let outcome = http::retry(&self.retry, &std::thread::sleep, |_| {
            let resp = self
                .transport
                .post_json(&self.endpoint, &[], &body, self.timeout)
                .map_err(|e| Attempt::Transient(e.to_string()))?;
            if http::is_retryable_status(resp.status) {
                return Err(Attempt::Transient(format!("status {}", resp.status)));
            }
            if !(200..300).contains(&resp.status) {
                return Err(Attempt::Permanent(format!("status {}: {}", resp.status, resp.body)));
            }
            serde_json::from_str::<EmbedResponse>(&resp.body)
                .map_err(|e| Attempt::Permanent(format!("malformed response: {e}")))
        });
        let parsed = outcome
            .map(|(v, _)| v)
            .map_err(|(e, attempts)| EmbedError::ProviderUnavailable(format!("{e} after {attempts} attempt(s)")))?;
        if parsed.embeddings.len() != inputs.len() {
            return Err(EmbedError::ProviderUnavailable(format!(
                "asked for {} embeddings, got {}",
                inputs.len(),
                parsed.embeddings.len()
            )));
        }
        for v in &parsed.embeddings {
            if v.len() != self.dim {
                return Err(EmbedError::DimensionMismatch {
                    expected: self.dim,
                    found: v.len(),
                });
            }
        }
        Ok(parsed.embeddings)
    }

    fn text_of<'q>(&self, q: &'q Query) -> Result<&'q str, EmbedError> {
        q.payload.as_text().ok_or_else(|| EmbedError::UnsupportedStyle {
            style: q.style,
            provider: self.name().to_string(),
            reason: "the service accepts text inputs only".into(),
        })
    }
}

impl Embedder for ExternalProvider {
    fn name(&self) -> &str {
        "external"
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn config_hash(&self) -> u64 {
        self.config_hash
    }

    fn embed(&self, q: &Query) -> Result<Embedding, EmbedError> {
        let text = self.text_of(q)?;
        let raw = self.request(&[text])?;
        Embedding::from_raw(&raw[0], StyleTag::Single(q.style), self.name())
    }

    /// One request for the whole batch.
    fn embed_batch(&self, qs: &[Query]) -> Result<Vec<Embedding>, EmbedError> {
        if qs.is_empty() {
            return Ok(Vec::new());
        }
        let texts = qs
            .iter()
            .enumerate()
            .map(|(index, q)| {
                self.text_of(q).map_err(|e| EmbedError::Batch {
                    index,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let raw = self.request(&texts)?;
        raw.iter()
            .zip(qs)
            .enumerate()
            .map(|(index, (v, q))| {
                Embedding::from_raw(v, StyleTag::Single(q.style), self.name()).map_err(|e| EmbedError::Batch {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }

    fn param_checksum(&self) -> u32 {
        crc32fast::hash(&self.config_hash.to_le_bytes())
    }
}
