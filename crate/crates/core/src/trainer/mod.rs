//! Training of the prompt bank.
//!
//! Every item of a triplet goes through embed → select → adapt → encode.
//! The per-triplet objective is
//!
//! ```text
//! max(0, μ + dist(x_f, x_r) − dist(x_f, x_h)) + λ · Σ_{s ∈ sel(anchor)} dist(E_anchor, k_s)
//! ```
//!
//! with `dist` the cosine distance, averaged over the batch. Selection and
//! gating are discrete and held fixed in the backward pass, so keys learn
//! only through the alignment term. The encoder and embedders are frozen.

mod optim;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedders::{EmbedError, Embedder, Query};
use crate::encoder::{EncodeError, EncodeTrace, FrozenEncoder, Insertion};
use crate::numkit::{self, NumError};
use crate::pipeline::{prepare, PrepareError, PreparedQuery};
use crate::promptbank::{flatten_entries, AdaptTrace, BankError, PromptBank, PromptEntry, Selection};
use crate::seeding::{rng_for, tag};

pub use optim::{adamw_step, AdamState, Schedule, BETA1, BETA2, EPSILON};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("tape is stale: the bank changed since the forward pass")]
    StaleTape,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("training data is empty")]
    EmptyDataset,
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Numeric(#[from] NumError),
    #[error("I/O failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
}

impl From<PrepareError> for TrainError {
    fn from(e: PrepareError) -> Self {
        match e {
            PrepareError::Embed(e) => TrainError::Embed(e),
            PrepareError::Encode(e) => TrainError::Encode(e),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub margin: f64,
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 0.2,
            lambda: 0.5,
            lr: 1e-5,
            epochs: 20,
            batch: 24,
            warmup_epochs: 1,
            weight_decay: 0.01,
            seed: 42,
        }
    }
}

impl TrainConfig {
    /// `lr = 0` is accepted so that a run can be used as a frozen control.
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if !(self.margin > 0.0 && self.margin.is_finite()) {
            return err("margin must be > 0");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return err("lambda must be >= 0");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return err("lr must be finite and >= 0");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return err("weight_decay must be finite and >= 0");
        }
        if self.batch == 0 {
            return err("batch must be at least 1");
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plain struct serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `(anchor, positive, negative)`; the positive is the retrieval target and
/// the negative comes from a different concept.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor: Query,
    pub positive: Query,
    pub negative: Query,
}

/// `max(0, μ + dist(x_f, x_r) − dist(x_f, x_h))`.
pub fn triplet_loss(x_f: &[f64], x_r: &[f64], x_h: &[f64], margin: f64) -> Result<f64, NumError> {
    Ok((margin + numkit::cosine_dist(x_f, x_r)? - numkit::cosine_dist(x_f, x_h)?).max(0.0))
}

/// `Σ_s dist(E_q, k_s)` over the selected entries.
pub fn key_alignment_loss(e_q: &[f64], bank: &PromptBank, selection: &Selection) -> Result<f64, NumError> {
    selection
        .indices
        .iter()
        .map(|&i| numkit::cosine_dist(e_q, &bank.entry(i).key))
        .sum()
}

/// `∂ cos(a, b) / ∂a`.
fn cos_grad(a: &[f64], b: &[f64]) -> Vec<f64> {
    let na = numkit::norm(a);
    let nb = numkit::norm(b);
    let c = numkit::dot(a, b) / (na * nb);
    a.iter().zip(b).map(|(ai, bi)| (bi / nb - c * ai / na) / na).collect()
}

/// Gradient buffers shaped like the bank's entries.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub entries: Vec<PromptEntry>,
}

impl GradientSet {
    pub fn zeros_like(bank: &PromptBank) -> Self {
        Self {
            entries: bank.zeros_like(),
        }
    }

    /// Same order as [`PromptBank::flat_params`].
    pub fn flat(&self) -> Vec<f64> {
        flatten_entries(&self.entries)
    }

    fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            numkit::axpy(1.0, &b.key, &mut a.key);
            numkit::axpy(1.0, &b.prompt, &mut a.prompt);
            numkit::axpy(1.0, b.router.as_slice(), a.router.as_mut_slice());
            for (x, y) in a.experts.iter_mut().zip(&b.experts) {
                numkit::axpy(1.0, y.down.as_slice(), x.down.as_mut_slice());
                numkit::axpy(1.0, y.up.as_slice(), x.up.as_mut_slice());
            }
        }
    }
}

/// Intermediates of one item's path through the bank and encoder.
#[derive(Debug, Clone)]
pub struct ItemTape {
    pub selection: Selection,
    pub adapt: Vec<AdaptTrace>,
    pub encode: EncodeTrace,
}

impl ItemTape {
    pub fn feature(&self) -> &[f64] {
        &self.encode.output
    }
}

/// Runs one prepared item forward, keeping the trace.
pub fn item_forward(
    bank: &PromptBank,
    encoder: &FrozenEncoder,
    insertion: Insertion,
    item: &PreparedQuery,
) -> Result<ItemTape, TrainError> {
    let cfg = bank.config();
    let selection = bank.select(&item.embedding.vector, cfg.select)?;
    let adapt = selection
        .indices
        .iter()
        .map(|&i| bank.entry(i).adapt_traced(i, cfg.top_experts))
        .collect::<Result<Vec<_>, _>>()?;
    let prompts: Vec<Vec<f64>> = adapt.iter().map(|t| t.output.clone()).collect();
    let seq = encoder.compose(&prompts, &item.content)?;
    let encode = encoder.encode_traced(&seq, insertion)?;
    Ok(ItemTape {
        selection,
        adapt,
        encode,
    })
}

fn item_backward(
    tape: &ItemTape,
    grad_out: &[f64],
    bank: &PromptBank,
    encoder: &FrozenEncoder,
    grads: &mut GradientSet,
) {
    let gp = encoder.backward_prompts(&tape.encode, grad_out);
    for (tr, g) in tape.adapt.iter().zip(&gp) {
        tr.backward(bank.entry(tr.entry), g, &mut grads.entries[tr.entry]);
    }
}

#[derive(Debug, Clone)]
pub struct TripletTape {
    pub anchor: ItemTape,
    pub positive: ItemTape,
    pub negative: ItemTape,
    pub anchor_embedding: Vec<f64>,
    pub triplet: f64,
    pub key: f64,
}

impl TripletTape {
    pub fn loss(&self, lambda: f64) -> f64 {
        self.triplet + lambda * self.key
    }
}

/// Record of a batch forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    pub generation: u64,
    pub triplets: Vec<TripletTape>,
    pub loss: f64,
    lambda: f64,
}

/// The training objective bound to frozen components, with a memo of
/// prepared (embedded and tokenized) queries.
pub struct Objective<'a> {
    provider: &'a dyn Embedder,
    encoder: &'a FrozenEncoder,
    cfg: TrainConfig,
    memo: Mutex<HashMap<Query, Arc<PreparedQuery>>>,
}

impl<'a> Objective<'a> {
    pub fn new(provider: &'a dyn Embedder, encoder: &'a FrozenEncoder, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        Ok(Self {
            provider,
            encoder,
            cfg,
            memo: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn prepared(&self, q: &Query) -> Result<Arc<PreparedQuery>, TrainError> {
        if let Some(p) = self.memo.lock().unwrap_or_else(|p| p.into_inner()).get(q) {
            return Ok(Arc::clone(p));
        }
        let p = Arc::new(prepare(q, self.provider, self.encoder)?);
        self.memo
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(q.clone(), Arc::clone(&p));
        Ok(p)
    }

    fn insertion(&self) -> Insertion {
        self.encoder.config().insertion
    }

    pub fn triplet_forward(&self, t: &Triplet, bank: &PromptBank) -> Result<TripletTape, TrainError> {
        let a = self.prepared(&t.anchor)?;
        let p = self.prepared(&t.positive)?;
        let n = self.prepared(&t.negative)?;
        let ins = self.insertion();
        let anchor = item_forward(bank, self.encoder, ins, &a)?;
        let positive = item_forward(bank, self.encoder, ins, &p)?;
        let negative = item_forward(bank, self.encoder, ins, &n)?;
        let triplet = triplet_loss(anchor.feature(), positive.feature(), negative.feature(), self.cfg.margin)?;
        let key = key_alignment_loss(&a.embedding.vector, bank, &anchor.selection)?;
        Ok(TripletTape {
            anchor,
            positive,
            negative,
            anchor_embedding: a.embedding.vector.clone(),
            triplet,
            key,
        })
    }

    /// Mean batch loss and the tape for [`Objective::backward`].
    pub fn forward(&self, batch: &[Triplet], bank: &PromptBank) -> Result<(f64, Tape), TrainError> {
        if batch.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let triplets = batch
            .par_iter()
            .map(|t| self.triplet_forward(t, bank))
            .collect::<Result<Vec<_>, _>>()?;
        let loss = triplets.iter().map(|t| t.loss(self.cfg.lambda)).sum::<f64>() / batch.len() as f64;
        Ok((
            loss,
            Tape {
                generation: bank.generation(),
                triplets,
                loss,
                lambda: self.cfg.lambda,
            },
        ))
    }

    /// Exact gradients of the tape's mean loss with respect to every bank
    /// parameter. Per-triplet gradients are summed in batch order.
    pub fn backward(&self, tape: &Tape, bank: &PromptBank) -> Result<GradientSet, TrainError> {
        if tape.generation != bank.generation() {
            return Err(TrainError::StaleTape);
        }
        let scale = 1.0 / tape.triplets.len() as f64;
        let parts: Vec<Option<GradientSet>> = tape
            .triplets
            .par_iter()
            .map(|t| self.triplet_backward(t, bank, scale, tape.lambda))
            .collect();
        let mut total = GradientSet::zeros_like(bank);
        for g in parts.iter().flatten() {
            total.add_assign(g);
        }
        Ok(total)
    }

    fn triplet_backward(
        &self,
        t: &TripletTape,
        bank: &PromptBank,
        scale: f64,
        lambda: f64,
    ) -> Option<GradientSet> {
        let hinge_active = t.triplet > 0.0;
        if !hinge_active && lambda == 0.0 {
            return None;
        }
        let mut g = GradientSet::zeros_like(bank);
        if hinge_active {
            let (f, r, h) = (t.anchor.feature(), t.positive.feature(), t.negative.feature());
            // dist = 1 − cos: ∂/∂f = −∂cos(f,r)/∂f + ∂cos(f,h)/∂f
            let g_f: Vec<f64> = cos_grad(f, r)
                .iter()
                .zip(cos_grad(f, h))
                .map(|(a, b)| scale * (b - a))
                .collect();
            let g_r: Vec<f64> = cos_grad(r, f).iter().map(|x| -scale * x).collect();
            let g_h: Vec<f64> = cos_grad(h, f).iter().map(|x| scale * x).collect();
            item_backward(&t.anchor, &g_f, bank, self.encoder, &mut g);
            item_backward(&t.positive, &g_r, bank, self.encoder, &mut g);
            item_backward(&t.negative, &g_h, bank, self.encoder, &mut g);
        }
        if lambda != 0.0 {
            for &i in &t.anchor.selection.indices {
                let gk = cos_grad(&bank.entry(i).key, &t.anchor_embedding);
                numkit::axpy(-scale * lambda, &gk, &mut g.entries[i].key);
            }
        }
        Some(g)
    }

    /// Mean batch loss without recording a tape.
    pub fn loss(&self, batch: &[Triplet], bank: &PromptBank) -> Result<f64, TrainError> {
        Ok(self.forward(batch, bank)?.0)
    }
}

/// Per-epoch record of the loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub bank: PromptBank,
    pub history: Vec<EpochRecord>,
}

/// Optimizes `bank` on `data` with AdamW under the warmup + cosine schedule.
///
/// The example order is reshuffled each epoch from `cfg.seed`. Each epoch's
/// mean loss averages the per-triplet losses seen during that epoch, summed
/// in dataset order.
pub fn train(
    data: &[Triplet],
    bank: PromptBank,
    encoder: &FrozenEncoder,
    provider: &dyn Embedder,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_with(data, bank, encoder, provider, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with(
    data: &[Triplet],
    mut bank: PromptBank,
    encoder: &FrozenEncoder,
    provider: &dyn Embedder,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome, TrainError> {
    let objective = Objective::new(provider, encoder, *cfg)?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { bank, history: Vec::new() });
    }
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let steps_per_epoch = data.len().div_ceil(cfg.batch);
    let schedule = Schedule {
        base_lr: cfg.lr,
        warmup_steps: cfg.warmup_epochs * steps_per_epoch,
        total_steps: cfg.epochs * steps_per_epoch,
    };
    let mut state = AdamState::new(bank.parameter_count());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &[tag("train-order"), epoch as u64]));
        let mut per_example = vec![0.0; data.len()];
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch) {
            let batch: Vec<Triplet> = chunk.iter().map(|&i| data[i].clone()).collect();
            let (_, tape) = objective.forward(&batch, &bank)?;
            for (&i, t) in chunk.iter().zip(&tape.triplets) {
                per_example[i] = t.loss(cfg.lambda);
            }
            let grads = objective.backward(&tape, &bank)?;
            lr = schedule.lr_at(step);
            let mut params = bank.flat_params();
            adamw_step(&mut params, &grads.flat(), &mut state, lr, cfg.weight_decay)?;
            bank.set_flat_params(&params)?;
            step += 1;
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            mean_loss: per_example.iter().sum::<f64>() / data.len() as f64,
            lr,
        };
        on_epoch(&rec);
        history.push(rec);
    }
    Ok(TrainOutcome { bank, history })
}

/// `epoch,mean_loss,lr` with a header row.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,mean_loss,lr\n");
    for r in history {
        let _ = writeln!(out, "{},{},{}", r.epoch, r.mean_loss, r.lr);
    }
    out
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<(), TrainError> {
    std::fs::write(path, history_csv(history)).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}
