//! Synthetic multi-style benchmarks, recall grids and ablations.
//!
//! A bench renders `concepts × styles` corpus items (draw 0) plus
//! `queries_per_cell` evaluation queries and `train_queries_per_cell`
//! training anchors per (concept, style), each with its own noise draw.
//! Every query's ground truth in target style `t` is the corpus item of the
//! same concept in `t`.

mod ablation;
mod grid;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedders::{EmbedderConfig, ProviderKind, Query, Style};
use crate::pipeline::StageError;
use crate::promptbank::BankError;
use crate::seeding::{rng_for, tag};
use crate::trainer::{TrainError, Triplet};
use crate::vecindex::{EvidenceSet, VecIndex};

pub use ablation::{
    run_ablation, train_system, train_system_with, AblationAxis, AblationRow, AblationTable, SystemConfig, TrainedSystem,
};
pub use grid::{
    run_grid, CellKey, CellRecall, LatencyStats, LatencySummary, QuerySide, RecallReport, GRID_KS,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid bench config: {0}")]
    InvalidConfig(String),
    #[error("truth id {0:?} is not in the gallery")]
    UnknownTruthId(String),
    #[error("cell {cell}: {source}")]
    Cell {
        cell: String,
        #[source]
        source: StageError,
    },
    #[error(transparent)]
    Stage(#[from] StageError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error("ablation value {value}: {source}")]
    Ablation {
        value: String,
        #[source]
        source: Box<EvalError>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthBenchConfig {
    pub concepts: usize,
    pub styles: Vec<Style>,
    pub noise_scale: f64,
    pub queries_per_cell: usize,
    pub train_queries_per_cell: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for SynthBenchConfig {
    fn default() -> Self {
        Self {
            concepts: 32,
            styles: vec![Style::Text, Style::Image, Style::Sketch, Style::Art],
            noise_scale: 0.05,
            queries_per_cell: 8,
            train_queries_per_cell: 2,
            dim: 64,
            seed: 42,
        }
    }
}

impl SynthBenchConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        let err = |m: &str| Err(EvalError::InvalidConfig(m.to_string()));
        if self.concepts < 2 {
            return err("need at least 2 concepts");
        }
        let mut seen = self.styles.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.styles.len() {
            return err("styles must be distinct");
        }
        if self.styles.len() < 2 {
            return err("need at least 2 styles");
        }
        if self.queries_per_cell == 0 {
            return err("queries_per_cell must be at least 1");
        }
        if self.dim < 2 {
            return err("dim must be at least 2");
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return err("noise_scale must be finite and >= 0");
        }
        Ok(())
    }

    /// The synthetic embedder that renders this bench.
    pub fn embedder_config(&self) -> EmbedderConfig {
        EmbedderConfig {
            dimension: self.dim,
            provider: ProviderKind::Synthetic,
            seed: self.seed,
            noise_scale: self.noise_scale,
            ..EmbedderConfig::default()
        }
    }
}

/// One rendered bench item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchItem {
    pub concept: u64,
    pub draw: u64,
    pub query: Query,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bench {
    pub cfg: SynthBenchConfig,
    /// Gallery per target style, one item per concept.
    pub corpus: BTreeMap<Style, Vec<BenchItem>>,
    /// Evaluation queries per query style.
    pub queries: BTreeMap<Style, Vec<BenchItem>>,
    /// Training anchors per query style, on draws disjoint from `queries`.
    pub train: BTreeMap<Style, Vec<BenchItem>>,
    /// Query id → concept.
    pub truth: BTreeMap<String, u64>,
}

pub fn corpus_id(style: Style, concept: u64) -> String {
    format!("item-{style}-{concept:04}")
}

pub fn query_id(style: Style, concept: u64, draw: u64) -> String {
    format!("q-{style}-{concept:04}-{draw}")
}

fn render(style: Style, concept: u64, draw: u64, id: String) -> BenchItem {
    BenchItem {
        concept,
        draw,
        query: Query::synthetic(id, style, concept, draw),
    }
}

/// Deterministic bench rendering.
pub fn gen_bench(cfg: &SynthBenchConfig) -> Result<Bench, EvalError> {
    cfg.validate()?;
    let q = cfg.queries_per_cell as u64;
    let t = cfg.train_queries_per_cell as u64;
    let mut corpus = BTreeMap::new();
    let mut queries = BTreeMap::new();
    let mut train = BTreeMap::new();
    let mut truth = BTreeMap::new();
    for &s in &cfg.styles {
        let concepts = 0..cfg.concepts as u64;
        corpus.insert(s, concepts.clone().map(|c| render(s, c, 0, corpus_id(s, c))).collect());
        let mut qs = Vec::new();
        let mut ts = Vec::new();
        for c in concepts {
            for draw in 1..=q {
                let id = query_id(s, c, draw);
                truth.insert(id.clone(), c);
                qs.push(render(s, c, draw, id));
            }
            for draw in q + 1..=q + t {
                ts.push(render(s, c, draw, query_id(s, c, draw)));
            }
        }
        queries.insert(s, qs);
        train.insert(s, ts);
    }
    Ok(Bench {
        cfg: cfg.clone(),
        corpus,
        queries,
        train,
        truth,
    })
}

impl Bench {
    /// Id of the ground-truth item for `query_id` in gallery `target`.
    pub fn truth_id(&self, query_id: &str, target: Style) -> Option<String> {
        self.truth.get(query_id).map(|&c| corpus_id(target, c))
    }

    pub fn query(&self, style: Style, concept: u64, draw: u64) -> Option<&BenchItem> {
        let per = self.cfg.queries_per_cell as u64;
        if draw == 0 || draw > per {
            return None;
        }
        self.queries.get(&style)?.get((concept * per + draw - 1) as usize)
    }

    /// One triplet per (training anchor, target style): the positive is the
    /// same-concept gallery item and the negative a uniformly drawn
    /// different-concept item of the same gallery.
    pub fn training_triplets(&self, seed: u64) -> Vec<Triplet> {
        let n = self.cfg.concepts as u64;
        let mut out = Vec::new();
        for (&s, anchors) in &self.train {
            for a in anchors {
                for (&t, gallery) in &self.corpus {
                    let mut rng = rng_for(
                        seed,
                        &[tag("negative"), a.concept, a.draw, s as u64, t as u64],
                    );
                    let off = rand::Rng::random_range(&mut rng, 1..n);
                    let neg = (a.concept + off) % n;
                    out.push(Triplet {
                        anchor: a.query.clone(),
                        positive: gallery[a.concept as usize].query.clone(),
                        negative: gallery[neg as usize].query.clone(),
                    });
                }
            }
        }
        out
    }
}

/// 1 if `truth_id` is within the first `k` ranks. The id must belong to
/// `gallery`.
pub fn recall_at_k(ranked: &EvidenceSet, truth_id: &str, k: usize, gallery: &VecIndex) -> Result<bool, EvalError> {
    if gallery.get(truth_id).is_none() {
        return Err(EvalError::UnknownTruthId(truth_id.to_string()));
    }
    Ok(ranked.items.iter().take(k).any(|e| e.item.id == truth_id))
}

/// Mean of 0/1 hits; 0 for an empty set.
pub fn aggregate(hits: &[bool]) -> f64 {
    if hits.is_empty() {
        0.0
    } else {
        hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
    }
}
