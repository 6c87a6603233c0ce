//! Run configuration: one TOML document with a section per component.
//!
//! Resolution order, later wins: built-in defaults, the config file,
//! environment variables `PROMPTRAG__SECTION__KEY` (nested keys join with
//! `__`), then `--set section.key=value` overrides. Values are parsed as TOML
//! literals and fall back to plain strings. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedders::EmbedderConfig;
use crate::encoder::EncoderConfig;
use crate::evalharness::SynthBenchConfig;
use crate::promptbank::BankConfig;
use crate::rag::RagConfig;
use crate::trainer::TrainConfig;

pub const ENV_PREFIX: &str = "PROMPTRAG__";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad override {0:?}: expected section.key=value")]
    BadOverride(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndexConfig {
    /// Default result count for `query`.
    pub k: usize,
    /// Memoize query embeddings within a process.
    pub cache: bool,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self { k: 5, cache: true }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub embedder: EmbedderConfig,
    pub bank: BankConfig,
    pub encoder: EncoderConfig,
    pub trainer: TrainConfig,
    pub index: IndexConfig,
    pub rag: RagConfig,
    pub eval: SynthBenchConfig,
}

impl RunConfig {
    /// Checks every section and the shared latent dimension.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |s: &str, e: &dyn std::fmt::Display| ConfigError::Invalid(format!("[{s}] {e}"));
        self.embedder.validate().map_err(|e| inv("embedder", &e))?;
        self.bank.validate().map_err(|e| inv("bank", &e))?;
        self.encoder.validate().map_err(|e| inv("encoder", &e))?;
        self.trainer.validate().map_err(|e| inv("trainer", &e))?;
        self.eval.validate().map_err(|e| inv("eval", &e))?;
        if self.index.k == 0 || self.rag.k == 0 {
            return Err(ConfigError::Invalid("k must be positive".into()));
        }
        let d = self.embedder.dimension;
        if self.bank.dim != d || self.encoder.dim != d {
            return Err(ConfigError::Invalid(format!(
                "dimension mismatch: embedder {d}, bank {}, encoder {}",
                self.bank.dim, self.encoder.dim
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Inputs to [`resolve`], kept separate from the process so tests can pass
/// their own environment.
#[derive(Debug, Clone, Default)]
pub struct Sources {
    pub file: Option<PathBuf>,
    pub env: Vec<(String, String)>,
    pub overrides: Vec<String>,
}

impl Sources {
    pub fn from_process(file: Option<PathBuf>, overrides: Vec<String>) -> Self {
        Self {
            file,
            env: std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect(),
            overrides,
        }
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn set_path(root: &mut toml::Value, path: &[String], value: toml::Value) {
    let mut over = value;
    for key in path.iter().rev() {
        let mut t = toml::Table::new();
        t.insert(key.clone(), over);
        over = toml::Value::Table(t);
    }
    merge(root, over);
}

fn load_file(path: &Path) -> Result<toml::Value, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    toml::from_str::<toml::Table>(&text)
        .map(toml::Value::Table)
        .map_err(|e| ConfigError::Parse(format!("{}: {e}", path.display())))
}

/// Merges all sources over the defaults and validates the result.
pub fn resolve(src: &Sources) -> Result<RunConfig, ConfigError> {
    let mut value = toml::Value::try_from(RunConfig::default()).map_err(|e| ConfigError::Parse(e.to_string()))?;
    if let Some(p) = &src.file {
        merge(&mut value, load_file(p)?);
    }
    let mut env: Vec<&(String, String)> = src.env.iter().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect();
    env.sort();
    for (k, v) in env {
        let path: Vec<String> = k[ENV_PREFIX.len()..].split("__").map(str::to_lowercase).collect();
        if path.iter().any(String::is_empty) {
            return Err(ConfigError::BadOverride(k.clone()));
        }
        set_path(&mut value, &path, parse_literal(v));
    }
    for o in &src.overrides {
        let (k, v) = o.split_once('=').ok_or_else(|| ConfigError::BadOverride(o.clone()))?;
        let path: Vec<String> = k.trim().split('.').map(str::to_string).collect();
        if path.len() < 2 || path.iter().any(String::is_empty) {
            return Err(ConfigError::BadOverride(o.clone()));
        }
        set_path(&mut value, &path, parse_literal(v.trim()));
    }
    let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}
