//! The prompt bank: `N` entries of (key, base prompt, router, experts).
//!
//! A query embedding selects the `n` entries whose keys are most
//! cosine-similar; each selected prompt `P` is then adapted by its own
//! mixture of `K` low-rank experts:
//!
//! ```text
//! α  = top_e-renormalized softmax(P · R)
//! P' = Σ_k α_k (P + P·A_k·B_k)  =  P + Σ_k α_k P·A_k·B_k
//! ```
//!
//! `B_k` starts at zero, so a fresh bank returns its base prompts unchanged.

mod persist;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numkit::{self, Mat, NumError};
use crate::seeding::{gaussian_mat, gaussian_vec, rng_for, tag};

pub use persist::{BankManifest, BANK_FORMAT, BANK_VERSION};

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

/// Scale of the router initialization.
pub const ROUTER_INIT_SCALE: f64 = 0.01;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("invalid bank config: {0}")]
    InvalidConfig(String),
    #[error("prompt bank is empty")]
    EmptyBank,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("checksum mismatch: manifest says {expected:08x}, blob hashes to {found:08x}")]
    ChecksumMismatch { expected: u32, found: u32 },
    #[error("unsupported bank format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("malformed bank file: {0}")]
    Malformed(String),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Numeric(#[from] NumError),
}

/// Shape of a bank.
///
/// `entries` = N, `select` = n prompts per query, `experts` = K,
/// `rank` = r, `top_experts` = experts kept active per adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    pub dim: usize,
    pub entries: usize,
    pub select: usize,
    pub experts: usize,
    pub rank: usize,
    pub top_experts: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            entries: 16,
            select: 4,
            experts: 4,
            rank: 4,
            top_experts: 2,
        }
    }
}

impl BankConfig {
    pub fn validate(&self) -> Result<(), BankError> {
        let err = |m: &str| Err(BankError::InvalidConfig(m.to_string()));
        if self.dim == 0 {
            return err("dim must be positive");
        }
        if self.entries == 0 {
            return err("entries must be at least 1");
        }
        if self.select == 0 || self.select > self.entries {
            return err("select must satisfy 1 <= select <= entries");
        }
        if self.experts == 0 {
            return err("experts must be at least 1");
        }
        if self.top_experts == 0 || self.top_experts > self.experts {
            return err("top_experts must satisfy 1 <= top_experts <= experts");
        }
        if self.rank == 0 || self.rank > self.dim {
            return err("rank must satisfy 1 <= rank <= dim");
        }
        Ok(())
    }

    /// Trainable scalars: `N·(2d + dK + K·2dr)`.
    pub fn parameter_count(&self) -> usize {
        let (n, d, k, r) = (self.entries, self.dim, self.experts, self.rank);
        n * (2 * d + d * k + k * 2 * d * r)
    }
}

/// One low-rank expert: `down` is `A` (`d×r`), `up` is `B` (`r×d`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertAdapter {
    pub down: Mat,
    pub up: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub key: Vec<f64>,
    pub prompt: Vec<f64>,
    /// `d×K` routing matrix.
    pub router: Mat,
    pub experts: Vec<ExpertAdapter>,
}

impl PromptEntry {
    pub fn zeros(cfg: &BankConfig) -> Self {
        let (d, k, r) = (cfg.dim, cfg.experts, cfg.rank);
        Self {
            key: vec![0.0; d],
            prompt: vec![0.0; d],
            router: Mat::zeros(d, k),
            experts: (0..k)
                .map(|_| ExpertAdapter {
                    down: Mat::zeros(d, r),
                    up: Mat::zeros(r, d),
                })
                .collect(),
        }
    }

    fn check(&self, cfg: &BankConfig) -> Result<(), BankError> {
        let d = cfg.dim;
        let shape_ok = self.key.len() == d
            && self.prompt.len() == d
            && self.router.rows() == d
            && self.router.cols() == cfg.experts
            && self.experts.len() == cfg.experts
            && self.experts.iter().all(|e| {
                e.down.rows() == d && e.down.cols() == cfg.rank && e.up.rows() == cfg.rank && e.up.cols() == d
            });
        if !shape_ok {
            return Err(BankError::InvalidConfig("entry shape does not match bank config".into()));
        }
        if !numkit::all_finite(&self.key) || !numkit::all_finite(&self.prompt) {
            return Err(BankError::Numeric(NumError::NonFinite));
        }
        Ok(())
    }

    /// Routing weights for `probe`: softmax over `probe · router`, then only
    /// the `top_e` largest are kept (ties to the lower index) and
    /// renormalized.
    pub fn route(&self, probe: &[f64], top_e: usize) -> Result<Vec<f64>, BankError> {
        let logits = self.router.vecmat(probe)?;
        let probs = numkit::softmax(&logits)?;
        let active = top_indices(&probs, top_e);
        let mass: f64 = active.iter().map(|&k| probs[k]).sum();
        let mut out = vec![0.0; probs.len()];
        for &k in &active {
            out[k] = probs[k] / mass;
        }
        Ok(out)
    }

    /// `P' = P + Σ_k α_k · P·A_k·B_k` with `α = route(P)`.
    pub fn adapt(&self, top_e: usize) -> Result<Vec<f64>, BankError> {
        Ok(self.adapt_traced(usize::MAX, top_e)?.output)
    }

    /// [`PromptEntry::adapt`] that also keeps what the backward pass needs.
    pub fn adapt_traced(&self, entry_index: usize, top_e: usize) -> Result<AdaptTrace, BankError> {
        let alpha_full = self.route(&self.prompt, top_e)?;
        let active: Vec<usize> = (0..alpha_full.len()).filter(|&k| alpha_full[k] > 0.0).collect();
        let mut output = self.prompt.clone();
        let mut low = Vec::with_capacity(active.len());
        let mut delta = Vec::with_capacity(active.len());
        for &k in &active {
            let ex = &self.experts[k];
            let u = ex.down.vecmat(&self.prompt)?;
            let dlt = ex.up.vecmat(&u)?;
            numkit::axpy(alpha_full[k], &dlt, &mut output);
            low.push(u);
            delta.push(dlt);
        }
        Ok(AdaptTrace {
            entry: entry_index,
            alpha: active.iter().map(|&k| alpha_full[k]).collect(),
            active,
            low,
            delta,
            output,
        })
    }
}

/// Indices of the `count` largest values, ties broken by lower index.
fn top_indices(values: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(count.min(values.len()));
    idx.sort_unstable();
    idx
}

/// Intermediates of one adaptation.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptTrace {
    pub entry: usize,
    /// Experts kept by the gate, ascending.
    pub active: Vec<usize>,
    /// Renormalized weights of the active experts.
    pub alpha: Vec<f64>,
    /// `P·A_k` per active expert.
    pub low: Vec<Vec<f64>>,
    /// `P·A_k·B_k` per active expert.
    pub delta: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

impl AdaptTrace {
    /// Accumulates `∂L/∂(prompt, router, A, B)` into `grads` given
    /// `grad_out = ∂L/∂P'`. The gate's choice of active experts is held fixed.
    pub fn backward(&self, entry: &PromptEntry, grad_out: &[f64], grads: &mut PromptEntry) {
        let p = &entry.prompt;
        // identity path
        numkit::axpy(1.0, grad_out, &mut grads.prompt);

        // restricted softmax over the active set
        let g_alpha: Vec<f64> = self.delta.iter().map(|d| numkit::dot(grad_out, d)).collect();
        let mean: f64 = self.alpha.iter().zip(&g_alpha).map(|(a, g)| a * g).sum();
        for (slot, &k) in self.active.iter().enumerate() {
            let g_logit = self.alpha[slot] * (g_alpha[slot] - mean);
            if g_logit != 0.0 {
                // logits_k = Σ_i p_i R[i][k]
                for (i, &pi) in p.iter().enumerate() {
                    let cur = grads.router.get(i, k);
                    grads.router.set(i, k, cur + pi * g_logit);
                    grads.prompt[i] += entry.router.get(i, k) * g_logit;
                }
            }

            let ex = &entry.experts[k];
            let gx = &mut grads.experts[k];
            let a = self.alpha[slot];
            // delta = u · B
            gx.up.add_outer(a, &self.low[slot], grad_out);
            let mut g_low = ex.up.matvec(grad_out).expect("B is r x d");
            g_low.iter_mut().for_each(|x| *x *= a);
            // u = p · A
            gx.down.add_outer(1.0, p, &g_low);
            let g_p = ex.down.matvec(&g_low).expect("A is d x r");
            numkit::axpy(1.0, &g_p, &mut grads.prompt);
        }
    }
}

/// Indices of the selected entries with their cosine scores, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl Selection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    config: BankConfig,
    seed: u64,
    entries: Vec<PromptEntry>,
    generation: u64,
}

impl PromptBank {
    /// Seeded initialization: keys, prompts and every `A` are `N(0, 1/d)`,
    /// every `B` is zero, routers are `N(0, 0.01²)`.
    pub fn init(config: BankConfig, seed: u64) -> Result<Self, BankError> {
        config.validate()?;
        let d = config.dim;
        let s = 1.0 / (d as f64).sqrt();
        let entries = (0..config.entries)
            .map(|i| {
                let i = i as u64;
                let key = gaussian_vec(&mut rng_for(seed, &[tag("bank-key"), i]), d, s);
                let prompt = gaussian_vec(&mut rng_for(seed, &[tag("bank-prompt"), i]), d, s);
                let router = gaussian_mat(
                    &mut rng_for(seed, &[tag("bank-router"), i]),
                    d,
                    config.experts,
                    ROUTER_INIT_SCALE,
                );
                let experts = (0..config.experts)
                    .map(|k| ExpertAdapter {
                        down: gaussian_mat(&mut rng_for(seed, &[tag("bank-down"), i, k as u64]), d, config.rank, s),
                        up: Mat::zeros(config.rank, d),
                    })
                    .collect();
                PromptEntry {
                    key,
                    prompt,
                    router,
                    experts,
                }
            })
            .collect();
        Ok(Self {
            config,
            seed,
            entries,
            generation: next_generation(),
        })
    }

    /// Builds a bank from explicit entries.
    pub fn from_entries(config: BankConfig, seed: u64, entries: Vec<PromptEntry>) -> Result<Self, BankError> {
        config.validate()?;
        if entries.len() != config.entries {
            return Err(BankError::InvalidConfig(format!(
                "config declares {} entries, got {}",
                config.entries,
                entries.len()
            )));
        }
        for e in &entries {
            e.check(&config)?;
        }
        Ok(Self {
            config,
            seed,
            entries,
            generation: next_generation(),
        })
    }

    pub fn config(&self) -> &BankConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn entries(&self) -> &[PromptEntry] {
        &self.entries
    }

    pub fn entry(&self, i: usize) -> &PromptEntry {
        &self.entries[i]
    }

    /// Mutable access; invalidates outstanding tapes.
    pub fn entry_mut(&mut self, i: usize) -> &mut PromptEntry {
        self.generation = next_generation();
        &mut self.entries[i]
    }

    /// Changes on every mutation; tapes use it to detect staleness.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn parameter_count(&self) -> usize {
        self.config.parameter_count()
    }

    /// The `n` entries whose keys are most cosine-similar to `query`, best
    /// first, ties to the lower entry index.
    pub fn select(&self, query: &[f64], n: usize) -> Result<Selection, BankError> {
        if self.entries.is_empty() {
            return Err(BankError::EmptyBank);
        }
        if query.len() != self.config.dim {
            return Err(BankError::DimensionMismatch {
                expected: self.config.dim,
                found: query.len(),
            });
        }
        if n == 0 || n > self.entries.len() {
            return Err(BankError::InvalidConfig(format!(
                "cannot select {n} of {} entries",
                self.entries.len()
            )));
        }
        let scores = self
            .entries
            .iter()
            .map(|e| numkit::cosine_sim(query, &e.key))
            .collect::<Result<Vec<f64>, _>>()?;
        let mut idx: Vec<usize> = (0..scores.len()).collect();
        idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        idx.truncate(n);
        Ok(Selection {
            scores: idx.iter().map(|&i| scores[i]).collect(),
            indices: idx,
        })
    }

    pub fn route(&self, entry: usize, probe: &[f64]) -> Result<Vec<f64>, BankError> {
        self.entries[entry].route(probe, self.config.top_experts)
    }

    pub fn adapt_prompt(&self, entry: usize) -> Result<Vec<f64>, BankError> {
        self.entries[entry].adapt(self.config.top_experts)
    }

    /// Selection followed by adaptation, in selection order.
    pub fn retrieve_adapted(&self, query: &[f64], n: usize) -> Result<Vec<Vec<f64>>, BankError> {
        let sel = self.select(query, n)?;
        sel.indices.iter().map(|&i| self.adapt_prompt(i)).collect()
    }

    /// All parameters in the serialized order: keys, prompts, routers, then
    /// per entry per expert `A` followed by `B`.
    pub fn flat_params(&self) -> Vec<f64> {
        flatten_entries(&self.entries)
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), BankError> {
        if flat.len() != self.parameter_count() {
            return Err(BankError::DimensionMismatch {
                expected: self.parameter_count(),
                found: flat.len(),
            });
        }
        if !numkit::all_finite(flat) {
            return Err(BankError::Numeric(NumError::NonFinite));
        }
        unflatten_into(&mut self.entries, flat);
        self.generation = next_generation();
        Ok(())
    }

    /// CRC-32 of the serialized parameter blob.
    pub fn checksum(&self) -> u32 {
        crc32fast::hash(&persist::blob_bytes(&self.flat_params()))
    }

    /// Entries shaped like this bank, all zero; used for gradients.
    pub fn zeros_like(&self) -> Vec<PromptEntry> {
        (0..self.config.entries).map(|_| PromptEntry::zeros(&self.config)).collect()
    }
}

pub(crate) fn flatten_entries(entries: &[PromptEntry]) -> Vec<f64> {
    let mut out = Vec::new();
    for e in entries {
        out.extend_from_slice(&e.key);
    }
    for e in entries {
        out.extend_from_slice(&e.prompt);
    }
    for e in entries {
        out.extend_from_slice(e.router.as_slice());
    }
    for e in entries {
        for ex in &e.experts {
            out.extend_from_slice(ex.down.as_slice());
            out.extend_from_slice(ex.up.as_slice());
        }
    }
    out
}

fn unflatten_into(entries: &mut [PromptEntry], flat: &[f64]) {
    let mut pos = 0;
    let mut take = |dst: &mut [f64]| {
        dst.copy_from_slice(&flat[pos..pos + dst.len()]);
        pos += dst.len();
    };
    for e in entries.iter_mut() {
        take(&mut e.key);
    }
    for e in entries.iter_mut() {
        take(&mut e.prompt);
    }
    for e in entries.iter_mut() {
        take(e.router.as_mut_slice());
    }
    for e in entries.iter_mut() {
        for ex in e.experts.iter_mut() {
            take(ex.down.as_mut_slice());
            take(ex.up.as_mut_slice());
        }
    }
}

/// Copy-on-write bank handle for serving while training publishes updates.
pub type SharedBank = crate::snapshot::Shared<PromptBank>;
