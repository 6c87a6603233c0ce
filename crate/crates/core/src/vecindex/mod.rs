//! Exact cosine top-k over corpus embeddings.

mod cache;
mod persist;

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedders::Style;
use crate::numkit::{self, NumError};

pub use cache::{cached_embed, fingerprint, QueryCache};
pub use persist::{IndexManifest, INDEX_FORMAT, INDEX_VERSION};

/// Tolerance on `‖embedding‖ = 1` when items are added.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("duplicate item id {0:?}")]
    DuplicateId(String),
    #[error("dimension mismatch for item {id:?}: index has {expected}, item has {found}")]
    DimensionMismatch { id: String, expected: usize, found: usize },
    #[error("embedding of item {id:?} is not unit-normalized (norm {norm})")]
    NotNormalized { id: String, norm: f64 },
    #[error("index is empty")]
    EmptyIndex,
    #[error("k must be at least 1")]
    InvalidK,
    #[error("checksum mismatch in {file}: manifest says {expected:08x}, data hashes to {found:08x}")]
    ChecksumMismatch { file: String, expected: u32, found: u32 },
    #[error("unsupported index format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed index file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Numeric(#[from] NumError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub id: String,
    pub style: Style,
    pub content: String,
    pub embedding: Vec<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

/// One retrieved item; `rank` starts at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Evidence {
    pub rank: usize,
    pub score: f64,
    pub item: Arc<CorpusItem>,
}

/// Ranked retrieval result: scores non-increasing, equal scores ordered by id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvidenceSet {
    pub items: Vec<Evidence>,
    pub k: usize,
}

impl EvidenceSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.items.iter().map(|e| e.item.id.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VecIndex {
    dim: usize,
    items: Vec<Arc<CorpusItem>>,
    by_id: HashMap<String, usize>,
}

impl VecIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            items: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    pub fn build(dim: usize, items: impl IntoIterator<Item = CorpusItem>) -> Result<Self, IndexError> {
        let mut idx = Self::new(dim);
        for it in items {
            idx.add(it)?;
        }
        Ok(idx)
    }

    pub fn add(&mut self, item: CorpusItem) -> Result<(), IndexError> {
        if self.by_id.contains_key(&item.id) {
            return Err(IndexError::DuplicateId(item.id));
        }
        if item.embedding.len() != self.dim {
            return Err(IndexError::DimensionMismatch {
                id: item.id,
                expected: self.dim,
                found: item.embedding.len(),
            });
        }
        let norm = numkit::norm(&item.embedding);
        if !numkit::all_finite(&item.embedding) || (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(IndexError::NotNormalized { id: item.id, norm });
        }
        self.by_id.insert(item.id.clone(), self.items.len());
        self.items.push(Arc::new(item));
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&CorpusItem> {
        self.by_id.get(id).map(|&i| self.items[i].as_ref())
    }

    pub fn items(&self) -> &[Arc<CorpusItem>] {
        &self.items
    }

    /// The `k` items most cosine-similar to `q` by full scan; ties go to the
    /// lexicographically lower id.
    pub fn top_k(&self, q: &[f64], k: usize) -> Result<EvidenceSet, IndexError> {
        if self.items.is_empty() {
            return Err(IndexError::EmptyIndex);
        }
        if k == 0 {
            return Err(IndexError::InvalidK);
        }
        if q.len() != self.dim {
            return Err(IndexError::DimensionMismatch {
                id: "<query>".into(),
                expected: self.dim,
                found: q.len(),
            });
        }
        let qn = numkit::norm(q);
        if qn < numkit::NORM_FLOOR {
            return Err(NumError::ZeroVector.into());
        }
        let scored: Vec<(f64, usize)> = self
            .items
            .iter()
            .enumerate()
            .map(|(i, it)| ((numkit::dot(q, &it.embedding) / qn).clamp(-1.0, 1.0), i))
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| {
            b.0.total_cmp(&a.0)
                .then_with(|| self.items[a.1].id.cmp(&self.items[b.1].id))
        };
        let mut scored = scored;
        let keep = k.min(scored.len());
        if keep < scored.len() {
            scored.select_nth_unstable_by(keep - 1, order);
            scored.truncate(keep);
        }
        scored.sort_by(order);
        Ok(EvidenceSet {
            items: scored
                .into_iter()
                .enumerate()
                .map(|(r, (score, i))| Evidence {
                    rank: r + 1,
                    score,
                    item: Arc::clone(&self.items[i]),
                })
                .collect(),
            k,
        })
    }

    /// CRC-32 of the embedding blob, as recorded by [`VecIndex::save`].
    pub fn checksum(&self) -> u32 {
        crc32fast::hash(&persist::embedding_bytes(&self.items))
    }
}

/// Copy-on-write index handle.
pub type SharedIndex = crate::snapshot::Shared<VecIndex>;
