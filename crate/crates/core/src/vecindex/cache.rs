//! Memo of query embeddings keyed by a content fingerprint.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::RwLock;

use sha2::{Digest, Sha256};

use crate::embedders::{EmbedError, Embedder, Embedding, Query};

/// SHA-256 over provider name, provider config hash, style and payload.
pub fn fingerprint(provider: &dyn Embedder, q: &Query) -> [u8; 32] {
    let mut h = Sha256::new();
    for part in [provider.name().as_bytes(), q.style.as_str().as_bytes()] {
        h.update((part.len() as u64).to_le_bytes());
        h.update(part);
    }
    h.update(provider.config_hash().to_le_bytes());
    let payload = q.payload.as_bytes();
    h.update((payload.len() as u64).to_le_bytes());
    h.update(payload);
    h.finalize().into()
}

/// Concurrent cache; identical fingerprints always map to identical values,
/// so racing inserts are harmless.
#[derive(Debug, Default)]
pub struct QueryCache {
    map: RwLock<HashMap<[u8; 32], Embedding>>,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl QueryCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &[u8; 32]) -> Option<Embedding> {
        self.map.read().unwrap_or_else(|p| p.into_inner()).get(key).cloned()
    }

    pub fn insert(&self, key: [u8; 32], e: Embedding) {
        self.map.write().unwrap_or_else(|p| p.into_inner()).insert(key, e);
    }

    pub fn len(&self) -> usize {
        self.map.read().unwrap_or_else(|p| p.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> u64 {
        self.misses.load(Ordering::Relaxed)
    }
}

/// Cached [`Embedder::embed`]; provider errors are returned and not stored.
pub fn cached_embed(cache: &QueryCache, q: &Query, provider: &dyn Embedder) -> Result<Embedding, EmbedError> {
    let key = fingerprint(provider, q);
    if let Some(e) = cache.get(&key) {
        cache.hits.fetch_add(1, Ordering::Relaxed);
        return Ok(e);
    }
    cache.misses.fetch_add(1, Ordering::Relaxed);
    let e = provider.embed(q)?;
    cache.insert(key, e.clone());
    Ok(e)
}
