//! Prototype embedding: maps style-tagged queries into the shared
//! `d`-dimensional latent space through pluggable providers.
//!
//! Three providers ship with the crate:
//!
//! * [`SyntheticProvider`]: seeded concept vectors pushed through per-style
//!   rotations plus Gaussian noise. It also produces patch tokens for the
//!   encoder, and is what the benchmark harness runs on.
//! * [`HashedTextProvider`]: bag of signed token hashes.
//! * [`ExternalProvider`]: a JSON-over-HTTP embedding service.
//!
//! Providers are immutable after construction.

mod external;
mod hashed;
mod synthetic;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::http::RetryPolicy;
use crate::numkit::{self, NumError};

pub use external::{ExternalConfig, ExternalProvider};
pub use hashed::{split_tokens, HashedTextProvider};
pub use synthetic::SyntheticProvider;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Text,
    Image,
    Sketch,
    Art,
    #[serde(rename = "lowres")]
    LowRes,
    AudioTranscript,
}

impl Style {
    pub const ALL: [Style; 6] = [
        Style::Text,
        Style::Image,
        Style::Sketch,
        Style::Art,
        Style::LowRes,
        Style::AudioTranscript,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Style::Text => "text",
            Style::Image => "image",
            Style::Sketch => "sketch",
            Style::Art => "art",
            Style::LowRes => "lowres",
            Style::AudioTranscript => "audio_transcript",
        }
    }

    /// Styles whose payload is a token sequence rather than pixels.
    pub fn is_textual(self) -> bool {
        matches!(self, Style::Text | Style::AudioTranscript)
    }

    pub(crate) fn index(self) -> u64 {
        Style::ALL.iter().position(|s| *s == self).unwrap_or(0) as u64
    }
}

impl fmt::Display for Style {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Style {
    type Err = EmbedError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Style::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| EmbedError::UnknownStyle(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Payload {
    Text(String),
    Bytes(Vec<u8>),
}

impl Payload {
    pub fn as_bytes(&self) -> &[u8] {
        match self {
            Payload::Text(s) => s.as_bytes(),
            Payload::Bytes(b) => b,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Payload::Text(s) => Some(s),
            Payload::Bytes(b) => std::str::from_utf8(b).ok(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.as_bytes().is_empty()
    }

    /// Parses the `synth:<concept>:<draw>` reference form used by the
    /// synthetic provider.
    pub fn synth_ref(&self) -> Option<SynthRef> {
        let text = self.as_text()?.trim();
        let rest = text.strip_prefix("synth:")?;
        let (c, d) = rest.split_once(':')?;
        Some(SynthRef {
            concept: c.parse().ok()?,
            draw: d.parse().ok()?,
        })
    }
}

/// A synthetic item: concept `concept` rendered with noise draw `draw`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SynthRef {
    pub concept: u64,
    pub draw: u64,
}

impl fmt::Display for SynthRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "synth:{}:{}", self.concept, self.draw)
    }
}

/// A raw retrieval request.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub style: Style,
    pub payload: Payload,
}

impl Query {
    pub fn new(id: impl Into<String>, style: Style, payload: Payload) -> Result<Self, EmbedError> {
        if payload.is_empty() {
            return Err(EmbedError::EmptyInput);
        }
        Ok(Self {
            id: id.into(),
            style,
            payload,
        })
    }

    pub fn text(id: impl Into<String>, style: Style, text: impl Into<String>) -> Result<Self, EmbedError> {
        Self::new(id, style, Payload::Text(text.into()))
    }

    pub fn synthetic(id: impl Into<String>, style: Style, concept: u64, draw: u64) -> Self {
        Self {
            id: id.into(),
            style,
            payload: Payload::Text(SynthRef { concept, draw }.to_string()),
        }
    }
}

/// Style label carried by an embedding; fused embeddings carry all inputs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleTag {
    Single(Style),
    Composite(Vec<Style>),
}

impl fmt::Display for StyleTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StyleTag::Single(s) => write!(f, "{s}"),
            StyleTag::Composite(ss) => {
                let parts: Vec<&str> = ss.iter().map(|s| s.as_str()).collect();
                write!(f, "{}", parts.join("+"))
            }
        }
    }
}

/// Unit-normalized point in the shared latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub style: StyleTag,
    pub source: String,
}

impl Embedding {
    /// Normalizes `raw` and wraps it.
    pub fn from_raw(raw: &[f64], style: StyleTag, source: impl Into<String>) -> Result<Self, EmbedError> {
        Ok(Self {
            vector: numkit::normalize(raw)?,
            style,
            source: source.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbedError {
    #[error("style {style} unsupported by provider {provider}: {reason}")]
    UnsupportedStyle {
        style: Style,
        provider: String,
        reason: String,
    },
    #[error("unknown style tag {0:?}")]
    UnknownStyle(String),
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("query {index} in batch failed: {source}")]
    Batch {
        index: usize,
        #[source]
        source: Box<EmbedError>,
    },
    #[error("empty input")]
    EmptyInput,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("invalid embedder config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numeric(#[from] NumError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Synthetic,
    HashedText,
    External,
}

/// Provider selection and parameters.
///
/// `style_strength` scales the Gaussian perturbation of the identity before
/// orthogonalization: 0 gives identical styles, large values approach a
/// uniformly random rotation per style.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub dimension: usize,
    pub provider: ProviderKind,
    pub seed: u64,
    pub noise_scale: f64,
    pub style_strength: f64,
    pub patch_count: usize,
    pub external: ExternalConfig,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            dimension: 64,
            provider: ProviderKind::Synthetic,
            seed: 42,
            noise_scale: 0.05,
            style_strength: 0.35,
            patch_count: 4,
            external: ExternalConfig::default(),
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dimension < 2 {
            return Err(EmbedError::InvalidConfig("dimension must be at least 2".into()));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(EmbedError::InvalidConfig("noise_scale must be finite and >= 0".into()));
        }
        if !(self.style_strength >= 0.0 && self.style_strength.is_finite()) {
            return Err(EmbedError::InvalidConfig("style_strength must be finite and >= 0".into()));
        }
        if self.patch_count == 0 {
            return Err(EmbedError::InvalidConfig("patch_count must be at least 1".into()));
        }
        Ok(())
    }

    /// Stable hash of every field; feeds cache fingerprints.
    pub fn config_hash(&self) -> u64 {
        let json = serde_json::to_string(self).unwrap_or_default();
        crate::seeding::fnv1a(json.as_bytes())
    }
}

pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;

    fn dimension(&self) -> usize;

    /// Hash identifying the provider's configuration.
    fn config_hash(&self) -> u64;

    fn embed(&self, q: &Query) -> Result<Embedding, EmbedError>;

    /// Elementwise [`Embedder::embed`], failing fast with the offending index.
    fn embed_batch(&self, qs: &[Query]) -> Result<Vec<Embedding>, EmbedError> {
        qs.iter()
            .enumerate()
            .map(|(index, q)| {
                self.embed(q).map_err(|e| EmbedError::Batch {
                    index,
                    source: Box::new(e),
                })
            })
            .collect()
    }

    /// Patch tokens for non-text payloads, if the provider can render them.
    fn patches(&self, _q: &Query) -> Option<Result<Vec<Vec<f64>>, EmbedError>> {
        None
    }

    /// CRC-32 over the provider's frozen parameters.
    fn param_checksum(&self) -> u32;
}

pub fn build_embedder(cfg: &EmbedderConfig) -> Result<Arc<dyn Embedder>, EmbedError> {
    cfg.validate()?;
    Ok(match cfg.provider {
        ProviderKind::Synthetic => Arc::new(SyntheticProvider::new(cfg)?),
        ProviderKind::HashedText => Arc::new(HashedTextProvider::new(cfg)?),
        ProviderKind::External => Arc::new(ExternalProvider::new(cfg)?),
    })
}

pub fn embed(q: &Query, provider: &dyn Embedder) -> Result<Embedding, EmbedError> {
    provider.embed(q)
}

pub fn embed_batch(qs: &[Query], provider: &dyn Embedder) -> Result<Vec<Embedding>, EmbedError> {
    provider.embed_batch(qs)
}

/// Mean-then-normalize fusion of several query embeddings.
pub fn fuse_multi_query(es: &[Embedding]) -> Result<Embedding, EmbedError> {
    let first = es.first().ok_or(EmbedError::EmptyInput)?;
    let d = first.dim();
    let mut sum = vec![0.0; d];
    let mut styles = Vec::new();
    for e in es {
        if e.dim() != d {
            return Err(EmbedError::DimensionMismatch {
                expected: d,
                found: e.dim(),
            });
        }
        numkit::axpy(1.0, &e.vector, &mut sum);
        match &e.style {
            StyleTag::Single(s) => styles.push(*s),
            StyleTag::Composite(ss) => styles.extend(ss.iter().copied()),
        }
    }
    if es.len() == 1 {
        return Ok(first.clone());
    }
    let mean: Vec<f64> = sum.iter().map(|x| x / es.len() as f64).collect();
    let source = if es.iter().all(|e| e.source == first.source) {
        first.source.clone()
    } else {
        "fused".to_string()
    };
    Embedding::from_raw(&mean, StyleTag::Composite(styles), source)
}

pub(crate) fn default_retry() -> RetryPolicy {
    RetryPolicy::default()
}
