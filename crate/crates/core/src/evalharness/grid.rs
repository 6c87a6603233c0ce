//! Recall over every (query style → target style) cell.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::time::{Duration, Instant};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{aggregate, recall_at_k, Bench, EvalError};
use crate::embedders::{fuse_multi_query, Embedding, Style, StyleTag};
use crate::pipeline::{Retriever, StageTimings};
use crate::vecindex::VecIndex;

/// Cutoffs reported per cell.
pub const GRID_KS: [usize; 2] = [1, 5];

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum QuerySide {
    Single(Style),
    Fused(Vec<Style>),
}

impl fmt::Display for QuerySide {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuerySide::Single(s) => write!(f, "{s}"),
            QuerySide::Fused(ss) => {
                let parts: Vec<&str> = ss.iter().map(|s| s.as_str()).collect();
                f.write_str(&parts.join("+"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct CellKey {
    pub query: QuerySide,
    pub target: Style,
}

impl CellKey {
    pub fn kind(&self) -> &'static str {
        match &self.query {
            QuerySide::Single(s) if *s == self.target => "diagonal",
            QuerySide::Single(_) => "off_diagonal",
            QuerySide::Fused(_) => "fused",
        }
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}", self.query, self.target)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CellRecall {
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub queries: usize,
}

/// Milliseconds over all timed queries.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LatencyStats {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

impl LatencyStats {
    fn from_samples(samples: &[Duration]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        ms.sort_by(f64::total_cmp);
        let pct = |p: f64| ms[((ms.len() - 1) as f64 * p).round() as usize];
        Self {
            mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
            p50_ms: pct(0.5),
            p95_ms: pct(0.95),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LatencySummary {
    pub embed: LatencyStats,
    pub bank: LatencyStats,
    pub encode: LatencyStats,
    pub top_k: LatencyStats,
    pub end_to_end: LatencyStats,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecallReport {
    pub grid: BTreeMap<CellKey, CellRecall>,
    pub latency: LatencySummary,
    pub fingerprint: String,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

impl RecallReport {
    fn cells_of<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = (&'a CellKey, &'a CellRecall)> + 'a {
        self.grid.iter().filter(move |(k, _)| k.kind() == kind)
    }

    pub fn diagonal_mean_r1(&self) -> f64 {
        mean(self.cells_of("diagonal").map(|(_, c)| c.r_at_1))
    }

    pub fn off_diagonal_mean_r1(&self) -> f64 {
        mean(self.cells_of("off_diagonal").map(|(_, c)| c.r_at_1))
    }

    pub fn off_diagonal_mean_r5(&self) -> f64 {
        mean(self.cells_of("off_diagonal").map(|(_, c)| c.r_at_5))
    }

    pub fn fused_mean_r1(&self) -> f64 {
        mean(self.cells_of("fused").map(|(_, c)| c.r_at_1))
    }

    /// Mean single-style R@1 of the component cells of every fused cell.
    pub fn fused_component_mean_r1(&self) -> f64 {
        let mut v = Vec::new();
        for (k, _) in self.cells_of("fused") {
            if let QuerySide::Fused(ss) = &k.query {
                for s in ss {
                    let key = CellKey {
                        query: QuerySide::Single(*s),
                        target: k.target,
                    };
                    if let Some(c) = self.grid.get(&key) {
                        v.push(c.r_at_1);
                    }
                }
            }
        }
        mean(v.into_iter())
    }

    /// `(fused cell, fused R@1, best component R@1)` for fused cells that do
    /// worse than their best single-style component.
    pub fn fused_regressions(&self) -> Vec<(CellKey, f64, f64)> {
        let mut out = Vec::new();
        for (k, c) in self.cells_of("fused") {
            if let QuerySide::Fused(ss) = &k.query {
                let best = ss
                    .iter()
                    .filter_map(|s| {
                        self.grid.get(&CellKey {
                            query: QuerySide::Single(*s),
                            target: k.target,
                        })
                    })
                    .map(|c| c.r_at_1)
                    .fold(0.0, f64::max);
                if c.r_at_1 < best {
                    out.push((k.clone(), c.r_at_1, best));
                }
            }
        }
        out
    }

    /// Recall cells only, so identical runs give identical bytes.
    pub fn to_csv(&self) -> String {
        let mut out = format!("# fingerprint={}\nquery_style,target_style,kind,r_at_1,r_at_5,queries\n", self.fingerprint);
        for (k, c) in &self.grid {
            let _ = writeln!(out, "{},{},{},{},{},{}", k.query, k.target, k.kind(), c.r_at_1, c.r_at_5, c.queries);
        }
        out
    }

    pub fn latency_csv(&self) -> String {
        let mut out = format!("# fingerprint={}\nstage,mean_ms,p50_ms,p95_ms,samples\n", self.fingerprint);
        let l = &self.latency;
        for (name, s) in [
            ("embed", l.embed),
            ("bank", l.bank),
            ("encode", l.encode),
            ("top_k", l.top_k),
            ("end_to_end", l.end_to_end),
        ] {
            let _ = writeln!(out, "{name},{:.6},{:.6},{:.6},{}", s.mean_ms, s.p50_ms, s.p95_ms, l.samples);
        }
        out
    }

    /// Grid in the layout of a query-style × target-style table, cells as
    /// `R@1 / R@5` percentages.
    pub fn to_markdown(&self) -> String {
        let targets: Vec<Style> = {
            let mut t: Vec<Style> = self.grid.keys().map(|k| k.target).collect();
            t.dedup();
            t.sort();
            t.dedup();
            t
        };
        let mut rows: Vec<QuerySide> = self.grid.keys().map(|k| k.query.clone()).collect();
        rows.sort();
        rows.dedup();
        let mut out = String::new();
        let _ = writeln!(out, "## Recall grid (R@1 / R@5, %)\n\nfingerprint: `{}`\n", self.fingerprint);
        let _ = write!(out, "| query \\ target |");
        for t in &targets {
            let _ = write!(out, " {t} |");
        }
        let _ = write!(out, "\n|---|");
        for _ in &targets {
            let _ = write!(out, "---|");
        }
        out.push('\n');
        for r in &rows {
            let _ = write!(out, "| {r} |");
            for t in &targets {
                let key = CellKey {
                    query: r.clone(),
                    target: *t,
                };
                match self.grid.get(&key) {
                    Some(c) => {
                        let _ = write!(out, " {:.1} / {:.1} |", 100.0 * c.r_at_1, 100.0 * c.r_at_5);
                    }
                    None => out.push_str(" - |"),
                }
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "\ndiagonal mean R@1: {:.4}  \noff-diagonal mean R@1: {:.4}  \nfused mean R@1: {:.4} (components {:.4})\n",
            self.diagonal_mean_r1(),
            self.off_diagonal_mean_r1(),
            self.fused_mean_r1(),
            self.fused_component_mean_r1()
        );
        let l = &self.latency;
        let _ = writeln!(out, "## Latency (ms, {} queries)\n\n| stage | mean | p50 | p95 |\n|---|---|---|---|", l.samples);
        for (name, s) in [
            ("embed", l.embed),
            ("bank", l.bank),
            ("encode", l.encode),
            ("top_k", l.top_k),
            ("end_to_end", l.end_to_end),
        ] {
            let _ = writeln!(out, "| {name} | {:.4} | {:.4} | {:.4} |", s.mean_ms, s.p50_ms, s.p95_ms);
        }
        out
    }
}

fn fingerprint(retriever: &Retriever, bench: &Bench) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&bench.cfg).unwrap_or_default());
    h.update(retriever.provider().name().as_bytes());
    h.update(retriever.provider().config_hash().to_le_bytes());
    h.update(serde_json::to_vec(retriever.bank().config()).unwrap_or_default());
    h.update(retriever.bank().checksum().to_le_bytes());
    h.update(serde_json::to_vec(retriever.encoder().config()).unwrap_or_default());
    h.update(retriever.encoder().param_checksum().to_le_bytes());
    let digest = h.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Evaluates every single-style cell and, with three or more styles, every
/// fused cell pairing two non-target styles. Query features are computed
/// once and reused across galleries; fused features are the normalized mean
/// of their components' features.
pub fn run_grid(retriever: &Retriever, bench: &Bench) -> Result<RecallReport, EvalError> {
    let k_max = *GRID_KS.iter().max().expect("non-empty");
    let styles = bench.cfg.styles.clone();
    let cell_err = |cell: String| move |source| EvalError::Cell { cell, source };

    let mut galleries: BTreeMap<Style, VecIndex> = BTreeMap::new();
    for &t in &styles {
        let items = bench.corpus[&t]
            .iter()
            .map(|it| (&it.query, format!("concept {} rendered as {t}", it.concept), BTreeMap::new()));
        let g = retriever.build_index(items).map_err(cell_err(format!("gallery {t}")))?;
        galleries.insert(t, g);
    }

    let mut feats: BTreeMap<Style, Vec<Vec<f64>>> = BTreeMap::new();
    let mut timings: Vec<StageTimings> = Vec::new();
    let mut e2e: Vec<Duration> = Vec::new();
    for &s in &styles {
        let probe_target = styles.iter().copied().find(|&t| t != s).unwrap_or(s);
        let mut fs = Vec::with_capacity(bench.queries[&s].len());
        for q in &bench.queries[&s] {
            let start = Instant::now();
            let (f, mut t) = retriever.feature_timed(&q.query).map_err(cell_err(format!("{s}->*")))?;
            let tk = Instant::now();
            let ev = galleries[&probe_target].top_k(&f, k_max);
            t.top_k = tk.elapsed();
            e2e.push(start.elapsed());
            ev.map_err(|e| EvalError::Cell {
                cell: format!("{s}->{probe_target}"),
                source: crate::pipeline::StageError::Retrieval(e),
            })?;
            timings.push(t);
            fs.push(f);
        }
        feats.insert(s, fs);
    }

    let mut grid = BTreeMap::new();
    let score = |key: &CellKey, features: &[Vec<f64>], ids: &[&str]| -> Result<CellRecall, EvalError> {
        let g = &galleries[&key.target];
        let mut hits1 = Vec::with_capacity(features.len());
        let mut hits5 = Vec::with_capacity(features.len());
        for (f, qid) in features.iter().zip(ids) {
            let ev = g.top_k(f, k_max).map_err(|e| EvalError::Cell {
                cell: key.to_string(),
                source: crate::pipeline::StageError::Retrieval(e),
            })?;
            let truth = bench.truth_id(qid, key.target).ok_or_else(|| EvalError::UnknownTruthId(qid.to_string()))?;
            hits1.push(recall_at_k(&ev, &truth, 1, g)?);
            hits5.push(recall_at_k(&ev, &truth, 5, g)?);
        }
        Ok(CellRecall {
            r_at_1: aggregate(&hits1),
            r_at_5: aggregate(&hits5),
            queries: features.len(),
        })
    };

    for &s in &styles {
        let ids: Vec<&str> = bench.queries[&s].iter().map(|q| q.query.id.as_str()).collect();
        for &t in &styles {
            let key = CellKey {
                query: QuerySide::Single(s),
                target: t,
            };
            let c = score(&key, &feats[&s], &ids)?;
            grid.insert(key, c);
        }
    }

    if styles.len() >= 3 {
        for &t in &styles {
            let others: Vec<Style> = styles.iter().copied().filter(|&s| s != t).collect();
            for i in 0..others.len() {
                for j in i + 1..others.len() {
                    let (a, b) = (others[i], others[j]);
                    let mut fused = Vec::with_capacity(feats[&a].len());
                    for (fa, fb) in feats[&a].iter().zip(&feats[&b]) {
                        let e = |v: &Vec<f64>, s| Embedding {
                            vector: v.clone(),
                            style: StyleTag::Single(s),
                            source: "feature".into(),
                        };
                        let f = fuse_multi_query(&[e(fa, a), e(fb, b)]).map_err(|err| EvalError::Cell {
                            cell: format!("{a}+{b}->{t}"),
                            source: crate::pipeline::StageError::Embed(err),
                        })?;
                        fused.push(f.vector);
                    }
                    // both components share concept and draw, so either id names the truth
                    let ids: Vec<&str> = bench.queries[&a].iter().map(|q| q.query.id.as_str()).collect();
                    let key = CellKey {
                        query: QuerySide::Fused(vec![a, b]),
                        target: t,
                    };
                    let c = score(&key, &fused, &ids)?;
                    grid.insert(key, c);
                }
            }
        }
    }

    let pick = |f: fn(&StageTimings) -> Duration| timings.iter().map(f).collect::<Vec<_>>();
    let latency = LatencySummary {
        embed: LatencyStats::from_samples(&pick(|t| t.embed)),
        bank: LatencyStats::from_samples(&pick(|t| t.bank)),
        encode: LatencyStats::from_samples(&pick(|t| t.encode)),
        top_k: LatencyStats::from_samples(&pick(|t| t.top_k)),
        end_to_end: LatencyStats::from_samples(&e2e),
        samples: e2e.len(),
    };
    Ok(RecallReport {
        grid,
        latency,
        fingerprint: fingerprint(retriever, bench),
    })
}
