//! Directory format: `manifest.json`, `embeddings.f64` (little-endian,
//! row-major, insertion order) and `metadata.ndjson` (one record per item,
//! same order).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{CorpusItem, IndexError, VecIndex};
use crate::embedders::Style;

pub const INDEX_FORMAT: &str = "promptrag-index";
pub const INDEX_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const EMBEDDINGS: &str = "embeddings.f64";
const METADATA: &str = "metadata.ndjson";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexManifest {
    pub format: String,
    pub version: u32,
    pub dim: usize,
    pub count: usize,
    pub embeddings_crc32: u32,
    pub metadata_crc32: u32,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaRecord {
    id: String,
    style: Style,
    content: String,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

pub(super) fn embedding_bytes(items: &[Arc<CorpusItem>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(items.iter().map(|i| i.embedding.len() * 8).sum());
    for it in items {
        for x in &it.embedding {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> IndexError + '_ {
    move |source| IndexError::IoFailure {
        path: path.display().to_string(),
        source,
    }
}

fn metadata_text(items: &[Arc<CorpusItem>]) -> Result<String, IndexError> {
    let mut out = String::new();
    for it in items {
        let rec = MetaRecord {
            id: it.id.clone(),
            style: it.style,
            content: it.content.clone(),
            metadata: it.metadata.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).map_err(|e| IndexError::Malformed(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}

impl VecIndex {
    pub fn manifest(&self) -> Result<IndexManifest, IndexError> {
        Ok(IndexManifest {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            dim: self.dim,
            count: self.items.len(),
            embeddings_crc32: self.checksum(),
            metadata_crc32: crc32fast::hash(metadata_text(&self.items)?.as_bytes()),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<(), IndexError> {
        fs::create_dir_all(dir).map_err(io(dir))?;
        let blob = embedding_bytes(&self.items);
        let meta = metadata_text(&self.items)?;
        let manifest = IndexManifest {
            format: INDEX_FORMAT.into(),
            version: INDEX_VERSION,
            dim: self.dim,
            count: self.items.len(),
            embeddings_crc32: crc32fast::hash(&blob),
            metadata_crc32: crc32fast::hash(meta.as_bytes()),
        };
        let p = dir.join(EMBEDDINGS);
        fs::write(&p, &blob).map_err(io(&p))?;
        let p = dir.join(METADATA);
        fs::write(&p, meta).map_err(io(&p))?;
        let p = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| IndexError::Malformed(e.to_string()))?;
        fs::write(&p, text).map_err(io(&p))?;
        Ok(())
    }

    /// Reads an index written by [`VecIndex::save`], verifying both checksums.
    pub fn load(dir: &Path) -> Result<Self, IndexError> {
        let p = dir.join(MANIFEST);
        let text = fs::read_to_string(&p).map_err(io(&p))?;
        let m: IndexManifest =
            serde_json::from_str(&text).map_err(|e| IndexError::Malformed(format!("{}: {e}", p.display())))?;
        if m.format != INDEX_FORMAT {
            return Err(IndexError::Malformed(format!("unexpected format tag {:?}", m.format)));
        }
        if m.version != INDEX_VERSION {
            return Err(IndexError::VersionMismatch {
                expected: INDEX_VERSION,
                found: m.version,
            });
        }
        let p = dir.join(EMBEDDINGS);
        let blob = fs::read(&p).map_err(io(&p))?;
        let found = crc32fast::hash(&blob);
        if found != m.embeddings_crc32 {
            return Err(IndexError::ChecksumMismatch {
                file: EMBEDDINGS.into(),
                expected: m.embeddings_crc32,
                found,
            });
        }
        let p = dir.join(METADATA);
        let meta = fs::read(&p).map_err(io(&p))?;
        let found = crc32fast::hash(&meta);
        if found != m.metadata_crc32 {
            return Err(IndexError::ChecksumMismatch {
                file: METADATA.into(),
                expected: m.metadata_crc32,
                found,
            });
        }
        if blob.len() != m.count * m.dim * 8 {
            return Err(IndexError::Malformed(format!(
                "embedding blob holds {} bytes, manifest implies {}",
                blob.len(),
                m.count * m.dim * 8
            )));
        }
        let meta = String::from_utf8(meta).map_err(|e| IndexError::Malformed(e.to_string()))?;
        let records: Vec<MetaRecord> = meta
            .lines()
            .map(|l| serde_json::from_str(l).map_err(|e| IndexError::Malformed(format!("{METADATA}: {e}"))))
            .collect::<Result<_, _>>()?;
        if records.len() != m.count {
            return Err(IndexError::Malformed(format!(
                "{} metadata records for {} items",
                records.len(),
                m.count
            )));
        }
        let mut idx = VecIndex::new(m.dim);
        let mut chunks = blob.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for r in records {
            let embedding: Vec<f64> = chunks.by_ref().take(m.dim).collect();
            idx.add(CorpusItem {
                id: r.id,
                style: r.style,
                content: r.content,
                embedding,
                metadata: r.metadata,
            })?;
        }
        Ok(idx)
    }
}
