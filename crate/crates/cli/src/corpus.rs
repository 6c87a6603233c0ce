//! Newline-delimited JSON corpus files, one item per line:
//! `{"id", "style", "content", "payload"?, "embedding"?, "metadata"?}`.
//!
//! `payload` is what the embedder sees and defaults to `content`. An
//! `embedding` is taken as the item's final unit feature and skips encoding.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use promptrag::embedders::{Payload, Query, Style};
use promptrag::pipeline::Retriever;
use promptrag::vecindex::CorpusItem;

use crate::error::{CliError, Exit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: String,
    pub style: String,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

/// Reads every non-blank line of an NDJSON file as `T`.
pub fn read_ndjson<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::new(Exit::Validation, format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

pub fn write_ndjson<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), CliError> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(&r).expect("rows serialize"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| CliError::io(path, e))
}

pub fn parse_style(s: &str) -> Result<Style, CliError> {
    s.parse::<Style>().map_err(|e| CliError::new(Exit::Validation, e.to_string()))
}

impl CorpusRecord {
    pub fn query(&self) -> Result<Query, CliError> {
        let payload = self.payload.clone().unwrap_or_else(|| self.content.clone());
        Ok(Query::new(self.id.clone(), parse_style(&self.style)?, Payload::Text(payload))
            .map_err(|e| CliError::new(Exit::Validation, format!("item {:?}: {e}", self.id)))?)
    }

    pub fn into_item(self, retriever: &Retriever) -> Result<CorpusItem, CliError> {
        let q = self.query()?;
        match self.embedding {
            Some(embedding) => Ok(CorpusItem {
                id: self.id,
                style: q.style,
                content: self.content,
                embedding,
                metadata: self.metadata,
            }),
            None => Ok(retriever.corpus_item(&q, self.content, self.metadata)?),
        }
    }
}
