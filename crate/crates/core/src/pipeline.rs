//! The prompt-conditioned feature path shared by queries and corpus items:
//! embed → select prompts → adapt → tokenize → compose → encode.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::embedders::{fuse_multi_query, EmbedError, Embedder, Embedding, Query, StyleTag};
use crate::encoder::{EncodeError, FrozenEncoder};
use crate::promptbank::{BankError, PromptBank};
use crate::vecindex::{cached_embed, CorpusItem, EvidenceSet, IndexError, QueryCache, VecIndex};

/// A query after the frozen stages: its prototype embedding and content tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedQuery {
    pub embedding: Embedding,
    pub content: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PrepareError {
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

pub fn prepare(q: &Query, provider: &dyn Embedder, encoder: &FrozenEncoder) -> Result<PreparedQuery, PrepareError> {
    Ok(PreparedQuery {
        embedding: provider.embed(q)?,
        content: encoder.tokenize(q, provider)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Setup,
    Embed,
    Bank,
    Encode,
    Retrieval,
    Generation,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Setup => "setup",
            Stage::Embed => "embed",
            Stage::Bank => "bank",
            Stage::Encode => "encode",
            Stage::Retrieval => "retrieval",
            Stage::Generation => "generation",
        })
    }
}

/// A failure tagged with the pipeline stage that produced it.
#[derive(Debug, Error)]
pub enum StageError {
    #[error("stage=setup: {0}")]
    Setup(String),
    #[error("stage=embed: {0}")]
    Embed(#[source] EmbedError),
    #[error("stage=bank: {0}")]
    Bank(#[source] BankError),
    #[error("stage=encode: {0}")]
    Encode(#[source] EncodeError),
    #[error("stage=retrieval: {0}")]
    Retrieval(#[source] IndexError),
}

impl StageError {
    pub fn stage(&self) -> Stage {
        match self {
            StageError::Setup(_) => Stage::Setup,
            StageError::Embed(_) => Stage::Embed,
            StageError::Bank(_) => Stage::Bank,
            StageError::Encode(_) => Stage::Encode,
            StageError::Retrieval(_) => Stage::Retrieval,
        }
    }
}

/// Wall-clock spent per stage for one feature computation.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub embed: Duration,
    pub bank: Duration,
    pub encode: Duration,
    pub top_k: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.embed + self.bank + self.encode + self.top_k
    }

    pub fn add(&mut self, o: &StageTimings) {
        self.embed += o.embed;
        self.bank += o.bank;
        self.encode += o.encode;
        self.top_k += o.top_k;
    }
}

/// Immutable snapshot of every component needed to compute features.
#[derive(Clone)]
pub struct Retriever {
    provider: Arc<dyn Embedder>,
    bank: Arc<PromptBank>,
    encoder: Arc<FrozenEncoder>,
    cache: Option<Arc<QueryCache>>,
}

impl fmt::Debug for Retriever {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Retriever")
            .field("provider", &self.provider.name())
            .field("bank", self.bank.config())
            .field("encoder", self.encoder.config())
            .field("cached", &self.cache.is_some())
            .finish()
    }
}

impl Retriever {
    pub fn new(
        provider: Arc<dyn Embedder>,
        bank: Arc<PromptBank>,
        encoder: Arc<FrozenEncoder>,
    ) -> Result<Self, StageError> {
        let dims = [provider.dimension(), bank.config().dim, encoder.config().dim];
        if dims.iter().any(|&d| d != dims[0]) {
            return Err(StageError::Setup(format!(
                "dimension mismatch: embedder {}, bank {}, encoder {}",
                dims[0], dims[1], dims[2]
            )));
        }
        Ok(Self {
            provider,
            bank,
            encoder,
            cache: None,
        })
    }

    pub fn with_cache(mut self, cache: Arc<QueryCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn provider(&self) -> &dyn Embedder {
        self.provider.as_ref()
    }

    pub fn bank(&self) -> &PromptBank {
        &self.bank
    }

    pub fn encoder(&self) -> &FrozenEncoder {
        &self.encoder
    }

    pub fn cache(&self) -> Option<&QueryCache> {
        self.cache.as_deref()
    }

    pub fn embed(&self, q: &Query) -> Result<Embedding, StageError> {
        match &self.cache {
            Some(c) => cached_embed(c, q, self.provider.as_ref()),
            None => self.provider.embed(q),
        }
        .map_err(StageError::Embed)
    }

    /// Prompt-conditioned feature of `q`, with per-stage timings.
    pub fn feature_timed(&self, q: &Query) -> Result<(Vec<f64>, StageTimings), StageError> {
        let mut t = StageTimings::default();
        let start = Instant::now();
        let e = self.embed(q)?;
        t.embed = start.elapsed();

        let start = Instant::now();
        let prompts = self
            .bank
            .retrieve_adapted(&e.vector, self.bank.config().select)
            .map_err(StageError::Bank)?;
        t.bank = start.elapsed();

        let start = Instant::now();
        let content = self
            .encoder
            .tokenize(q, self.provider.as_ref())
            .map_err(StageError::Encode)?;
        let seq = self.encoder.compose(&prompts, &content).map_err(StageError::Encode)?;
        let f = self.encoder.encode(&seq).map_err(StageError::Encode)?;
        t.encode = start.elapsed();
        Ok((f, t))
    }

    pub fn feature(&self, q: &Query) -> Result<Vec<f64>, StageError> {
        Ok(self.feature_timed(q)?.0)
    }

    /// Mean-then-normalize fusion of the features of several queries.
    pub fn fused_feature_timed(&self, qs: &[Query]) -> Result<(Vec<f64>, StageTimings), StageError> {
        let mut total = StageTimings::default();
        let mut feats = Vec::with_capacity(qs.len());
        for q in qs {
            let (f, t) = self.feature_timed(q)?;
            total.add(&t);
            feats.push(Embedding {
                vector: f,
                style: StyleTag::Single(q.style),
                source: "feature".into(),
            });
        }
        let fused = fuse_multi_query(&feats).map_err(StageError::Embed)?;
        Ok((fused.vector, total))
    }

    pub fn corpus_item(
        &self,
        q: &Query,
        content: impl Into<String>,
        metadata: BTreeMap<String, String>,
    ) -> Result<CorpusItem, StageError> {
        Ok(CorpusItem {
            id: q.id.clone(),
            style: q.style,
            content: content.into(),
            embedding: self.feature(q)?,
            metadata,
        })
    }

    /// Encodes every query through the feature path into a fresh index.
    pub fn build_index<'a>(
        &self,
        items: impl IntoIterator<Item = (&'a Query, String, BTreeMap<String, String>)>,
    ) -> Result<VecIndex, StageError> {
        let mut idx = VecIndex::new(self.bank.config().dim);
        for (q, content, meta) in items {
            idx.add(self.corpus_item(q, content, meta)?)
                .map_err(StageError::Retrieval)?;
        }
        Ok(idx)
    }

    pub fn retrieve_timed(
        &self,
        q: &Query,
        index: &VecIndex,
        k: usize,
    ) -> Result<(EvidenceSet, StageTimings), StageError> {
        if index.is_empty() {
            return Err(StageError::Retrieval(IndexError::EmptyIndex));
        }
        let (f, mut t) = self.feature_timed(q)?;
        let start = Instant::now();
        let ev = index.top_k(&f, k).map_err(StageError::Retrieval)?;
        t.top_k = start.elapsed();
        Ok((ev, t))
    }

    pub fn retrieve(&self, q: &Query, index: &VecIndex, k: usize) -> Result<EvidenceSet, StageError> {
        Ok(self.retrieve_timed(q, index, k)?.0)
    }
}
