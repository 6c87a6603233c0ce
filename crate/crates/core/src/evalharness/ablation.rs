//! Train-and-evaluate runs, one per setting of an ablation axis.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{run_grid, Bench, EvalError, RecallReport};
use crate::embedders::{EmbedderConfig, SyntheticProvider};
use crate::encoder::{EncoderConfig, FrozenEncoder, Insertion};
use crate::pipeline::Retriever;
use crate::promptbank::{BankConfig, PromptBank};
use crate::trainer::{EpochRecord, TrainConfig};

/// Everything needed to build and train a system on a bench.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemConfig {
    pub embedder: EmbedderConfig,
    pub bank: BankConfig,
    pub encoder: EncoderConfig,
    pub trainer: TrainConfig,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self {
            embedder: EmbedderConfig::default(),
            bank: BankConfig::default(),
            encoder: EncoderConfig::default(),
            trainer: TrainConfig::default(),
        }
    }
}

impl SystemConfig {
    /// Defaults with the embedder replaced by the bench's renderer and every
    /// dimension aligned to it.
    pub fn for_bench(bench: &Bench) -> Self {
        let mut s = Self::default();
        s.align_to(bench);
        s
    }

    pub fn align_to(&mut self, bench: &Bench) {
        self.embedder = bench.cfg.embedder_config();
        self.bank.dim = bench.cfg.dim;
        self.encoder.dim = bench.cfg.dim;
    }
}

pub struct TrainedSystem {
    pub untrained: Retriever,
    pub trained: Retriever,
    pub history: Vec<EpochRecord>,
    pub provider: Arc<SyntheticProvider>,
    pub encoder: Arc<FrozenEncoder>,
}

/// Initializes a bank from `sys.trainer.seed`, trains it on the bench's
/// training triplets and returns retrievers for both banks.
pub fn train_system(bench: &Bench, sys: &SystemConfig) -> Result<TrainedSystem, EvalError> {
    train_system_with(bench, sys, |_| {})
}

pub fn train_system_with(
    bench: &Bench,
    sys: &SystemConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainedSystem, EvalError> {
    let provider = Arc::new(SyntheticProvider::new(&sys.embedder).map_err(crate::pipeline::StageError::Embed)?);
    let encoder = Arc::new(FrozenEncoder::new(sys.encoder).map_err(crate::pipeline::StageError::Encode)?);
    let bank = PromptBank::init(sys.bank, sys.trainer.seed)?;
    let triplets = bench.training_triplets(sys.trainer.seed);
    let out = crate::trainer::train_with(&triplets, bank.clone(), &encoder, provider.as_ref(), &sys.trainer, on_epoch)?;
    let untrained = Retriever::new(provider.clone(), Arc::new(bank), encoder.clone())?;
    let trained = Retriever::new(provider.clone(), Arc::new(out.bank), encoder.clone())?;
    Ok(TrainedSystem {
        untrained,
        trained,
        history: out.history,
        provider,
        encoder,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    InsertionDepth,
    TokenNum,
    BankSize,
}

impl std::str::FromStr for AblationAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "insertion_depth" => Ok(AblationAxis::InsertionDepth),
            "token_num" => Ok(AblationAxis::TokenNum),
            "bank_size" => Ok(AblationAxis::BankSize),
            other => Err(format!(
                "unknown ablation axis {other:?} (expected insertion_depth, token_num or bank_size)"
            )),
        }
    }
}

impl std::fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AblationAxis::InsertionDepth => "insertion_depth",
            AblationAxis::TokenNum => "token_num",
            AblationAxis::BankSize => "bank_size",
        })
    }
}

impl AblationAxis {
    /// `base` with this axis set to `value`.
    pub fn apply(self, base: &SystemConfig, value: &str) -> Result<SystemConfig, EvalError> {
        let bad = |why: String| EvalError::InvalidConfig(format!("{self}={value}: {why}"));
        let mut s = base.clone();
        match self {
            AblationAxis::InsertionDepth => s.encoder.insertion = value.parse::<Insertion>().map_err(bad)?,
            AblationAxis::TokenNum => {
                s.encoder.token_num = value.parse::<usize>().map_err(|e| bad(e.to_string()))?;
                s.encoder.validate().map_err(|e| bad(e.to_string()))?;
            }
            AblationAxis::BankSize => {
                let n: usize = value.parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?;
                s.bank.entries = n;
                s.bank.select = s.bank.select.min(n);
                s.bank.validate().map_err(|e| bad(e.to_string()))?;
            }
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub value: String,
    pub off_diagonal_r1: f64,
    pub off_diagonal_r5: f64,
    pub diagonal_r1: f64,
    pub fused_r1: f64,
    pub first_loss: f64,
    pub final_loss: f64,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("axis,value,off_diagonal_r1,off_diagonal_r5,diagonal_r1,fused_r1,first_loss,final_loss,fingerprint\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                self.axis,
                r.value,
                r.off_diagonal_r1,
                r.off_diagonal_r5,
                r.diagonal_r1,
                r.fused_r1,
                r.first_loss,
                r.final_loss,
                r.fingerprint
            );
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = format!(
            "## Ablation: {}\n\n| {} | off-diag R@1 | off-diag R@5 | diag R@1 | fused R@1 | loss first → final |\n|---|---|---|---|---|---|\n",
            self.axis, self.axis
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {:.1} | {:.1} | {:.1} | {:.1} | {:.4} → {:.4} |",
                r.value,
                100.0 * r.off_diagonal_r1,
                100.0 * r.off_diagonal_r5,
                100.0 * r.diagonal_r1,
                100.0 * r.fused_r1,
                r.first_loss,
                r.final_loss
            );
        }
        out
    }
}

fn row(value: &str, report: &RecallReport, history: &[EpochRecord]) -> AblationRow {
    AblationRow {
        value: value.to_string(),
        off_diagonal_r1: report.off_diagonal_mean_r1(),
        off_diagonal_r5: report.off_diagonal_mean_r5(),
        diagonal_r1: report.diagonal_mean_r1(),
        fused_r1: report.fused_mean_r1(),
        first_loss: history.first().map_or(f64::NAN, |r| r.mean_loss),
        final_loss: history.last().map_or(f64::NAN, |r| r.mean_loss),
        fingerprint: report.fingerprint.clone(),
    }
}

/// One full train + grid evaluation per value, all from the same seed.
pub fn run_ablation(
    axis: AblationAxis,
    values: &[String],
    bench: &Bench,
    base: &SystemConfig,
) -> Result<AblationTable, EvalError> {
    if values.is_empty() {
        return Err(EvalError::InvalidConfig("ablation needs at least one value".into()));
    }
    let mut rows = Vec::with_capacity(values.len());
    for v in values {
        let wrap = |e: EvalError| EvalError::Ablation {
            value: v.clone(),
            source: Box::new(e),
        };
        let sys = axis.apply(base, v).map_err(wrap)?;
        let ts = train_system(bench, &sys).map_err(wrap)?;
        let report = run_grid(&ts.trained, bench).map_err(wrap)?;
        rows.push(row(v, &report, &ts.history));
    }
    Ok(AblationTable { axis, rows })
}
