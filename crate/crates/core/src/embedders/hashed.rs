use super::{EmbedError, Embedder, EmbedderConfig, Embedding, Query, StyleTag};
use crate::seeding::fnv1a;

/// Lowercases and splits on anything that is not alphanumeric.
pub fn split_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Bag of signed token hashes: each token lands in one of `d` buckets with a
/// ±1 sign; the sum is normalized.
#[derive(Debug, Clone)]
pub struct HashedTextProvider {
    dim: usize,
    seed: u64,
    config_hash: u64,
}

impl HashedTextProvider {
    pub fn new(cfg: &EmbedderConfig) -> Result<Self, EmbedError> {
        cfg.validate()?;
        Ok(Self {
            dim: cfg.dimension,
            seed: cfg.seed,
            config_hash: cfg.config_hash(),
        })
    }

    fn unsupported(&self, q: &Query, reason: &str) -> EmbedError {
        EmbedError::UnsupportedStyle {
            style: q.style,
            provider: self.name().to_string(),
            reason: reason.to_string(),
        }
    }
}

impl Embedder for HashedTextProvider {
    fn name(&self) -> &str {
        "hashed_text"
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn config_hash(&self) -> u64 {
        self.config_hash
    }

    fn embed(&self, q: &Query) -> Result<Embedding, EmbedError> {
        if !q.style.is_textual() {
            return Err(self.unsupported(q, "only text and transcripts are hashed"));
        }
        let text = q
            .payload
            .as_text()
            .ok_or_else(|| self.unsupported(q, "payload is not UTF-8 text"))?;
        let tokens = split_tokens(text);
        if tokens.is_empty() {
            return Err(self.unsupported(q, "payload has no tokens"));
        }
        let mut acc = vec![0.0; self.dim];
        for t in &tokens {
            let h = fnv1a(t.as_bytes()) ^ self.seed.rotate_left(17);
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) & 1 == 0 { 1.0 } else { -1.0 };
            acc[bucket] += sign;
        }
        // Opposite signs can cancel to an all-zero bag.
        Embedding::from_raw(&acc, StyleTag::Single(q.style), self.name())
            .map_err(|_| self.unsupported(q, "token hashes cancel to the zero vector"))
    }

    fn param_checksum(&self) -> u32 {
        crc32fast::hash(&self.seed.to_le_bytes())
    }
}
