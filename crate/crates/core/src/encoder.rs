//! The frozen feature extractor.
//!
//! A query is tokenized into content vectors, the adapted prompts are
//! prepended as soft tokens behind a fixed CLS vector, and `L` frozen layers
//! mix the sequence. Each layer is single-head similarity attention followed
//! by a residual channel map:
//!
//! ```text
//! s_ij = (x_i · W_att) · x_j        a_i = softmax_j(s_i)
//! h_i  = Σ_j a_ij x_j               y_i = x_i + act(h_i · W_ch)
//! ```
//!
//! Padding (all-zero content tokens) is masked out of the sequence entirely.
//! Under deep insertion the prompt positions are overwritten with the
//! adapted prompts before every layer after the first. The output is the
//! unit-normalized CLS row of the last layer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedders::{split_tokens, EmbedError, Embedder, Query};
use crate::numkit::{self, Mat, NumError};
use crate::seeding::{fnv1a, gaussian_mat, gaussian_vec, rng_for, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Insertion {
    Shallow,
    Deep,
}

impl std::str::FromStr for Insertion {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shallow" => Ok(Insertion::Shallow),
            "deep" => Ok(Insertion::Deep),
            other => Err(format!("unknown insertion mode {other:?} (expected shallow or deep)")),
        }
    }
}

impl std::fmt::Display for Insertion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Insertion::Shallow => "shallow",
            Insertion::Deep => "deep",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation's output `t`.
    fn slope_from_output(self, t: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - t * t,
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub dim: usize,
    pub insertion: Insertion,
    pub token_num: usize,
    pub max_len: usize,
    pub seed: u64,
    pub activation: Activation,
    /// Standard deviation of the attention projection entries.
    pub attention_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            dim: 64,
            insertion: Insertion::Deep,
            token_num: 4,
            max_len: 40,
            seed: 42,
            activation: Activation::Tanh,
            attention_scale: 1.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncodeError> {
        let err = |m: &str| Err(EncodeError::InvalidConfig(m.to_string()));
        if self.layers == 0 {
            return err("layers must be at least 1");
        }
        if self.dim < 2 {
            return err("dim must be at least 2");
        }
        if self.token_num == 0 {
            return err("token_num must be at least 1");
        }
        if self.max_len == 0 {
            return err("max_len must be at least 1");
        }
        if !(self.attention_scale.is_finite() && self.attention_scale >= 0.0) {
            return err("attention_scale must be finite and >= 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EncodeError {
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Numeric(#[from] NumError),
}

/// Frozen weights of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attention: Mat,
    pub channel: Mat,
}

/// `[CLS] ++ prompts (each repeated token_num times) ++ content`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<Vec<f64>>,
    /// Distinct prompts in selection order, kept for deep re-injection.
    pub prompts: Vec<Vec<f64>>,
    pub token_num: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn prompt_tokens(&self) -> usize {
        self.prompts.len() * self.token_num
    }

    pub fn content_tokens(&self) -> usize {
        self.tokens.len() - 1 - self.prompt_tokens()
    }

    /// Layout as `(cls, prompt_tokens, content_tokens)`.
    pub fn layout(&self) -> (usize, usize, usize) {
        (1, self.prompt_tokens(), self.content_tokens())
    }
}

/// Builds `[cls] ++ prompts×token_num ++ content`.
pub fn compose(
    cls: &[f64],
    prompts: &[Vec<f64>],
    content: &[Vec<f64>],
    token_num: usize,
) -> Result<TokenSequence, EncodeError> {
    let d = cls.len();
    for v in prompts.iter().chain(content) {
        if v.len() != d {
            return Err(EncodeError::DimensionMismatch {
                expected: d,
                found: v.len(),
            });
        }
    }
    let mut tokens = Vec::with_capacity(1 + prompts.len() * token_num + content.len());
    tokens.push(cls.to_vec());
    for p in prompts {
        for _ in 0..token_num {
            tokens.push(p.clone());
        }
    }
    tokens.extend(content.iter().cloned());
    Ok(TokenSequence {
        tokens,
        prompts: prompts.to_vec(),
        token_num,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrozenEncoder {
    cfg: EncoderConfig,
    cls: Vec<f64>,
    layers: Vec<LayerWeights>,
}

/// Intermediates of one layer over the unmasked rows.
#[derive(Debug, Clone)]
struct LayerTrace {
    /// Layer input, `n × d` row-major.
    x: Vec<f64>,
    /// Rows whose outputs were computed (`n`, or 1 for the last layer).
    rows: usize,
    q: Vec<f64>,
    attn: Vec<f64>,
    act: Vec<f64>,
}

/// Everything the backward pass needs from one [`FrozenEncoder::encode_traced`].
#[derive(Debug, Clone)]
pub struct EncodeTrace {
    layers: Vec<LayerTrace>,
    n_prompts: usize,
    token_num: usize,
    insertion: Insertion,
    raw_norm: f64,
    pub output: Vec<f64>,
}

impl FrozenEncoder {
    /// Seeded construction: CLS is a unit Gaussian direction, attention
    /// projections are `N(0, attention_scale²)` and channel maps `N(0, 1/d)`.
    pub fn new(cfg: EncoderConfig) -> Result<Self, EncodeError> {
        cfg.validate()?;
        let d = cfg.dim;
        let cls = numkit::normalize(&gaussian_vec(&mut rng_for(cfg.seed, &[tag("cls")]), d, 1.0))?;
        let layers = (0..cfg.layers)
            .map(|l| {
                let l = l as u64;
                LayerWeights {
                    attention: gaussian_mat(&mut rng_for(cfg.seed, &[tag("w-att"), l]), d, d, cfg.attention_scale),
                    channel: gaussian_mat(
                        &mut rng_for(cfg.seed, &[tag("w-ch"), l]),
                        d,
                        d,
                        1.0 / (d as f64).sqrt(),
                    ),
                }
            })
            .collect();
        Ok(Self { cfg, cls, layers })
    }

    /// Explicit weights, e.g. identity layers for tests.
    pub fn with_weights(cfg: EncoderConfig, cls: Vec<f64>, layers: Vec<LayerWeights>) -> Result<Self, EncodeError> {
        cfg.validate()?;
        let d = cfg.dim;
        if layers.len() != cfg.layers {
            return Err(EncodeError::InvalidConfig(format!(
                "config declares {} layers, got {}",
                cfg.layers,
                layers.len()
            )));
        }
        if cls.len() != d {
            return Err(EncodeError::DimensionMismatch {
                expected: d,
                found: cls.len(),
            });
        }
        for w in &layers {
            for m in [&w.attention, &w.channel] {
                if m.rows() != d || m.cols() != d {
                    return Err(EncodeError::DimensionMismatch {
                        expected: d,
                        found: m.rows(),
                    });
                }
            }
        }
        Ok(Self { cfg, cls, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn cls(&self) -> &[f64] {
        &self.cls
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    /// CRC-32 over CLS and every layer weight.
    pub fn param_checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for x in self
            .cls
            .iter()
            .chain(self.layers.iter().flat_map(|w| w.attention.as_slice().iter().chain(w.channel.as_slice())))
        {
            h.update(&x.to_le_bytes());
        }
        h.finalize()
    }

    /// Dense hashed vector for one text token.
    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = rng_for(self.cfg.seed, &[tag("token"), fnv1a(token.as_bytes())]);
        loop {
            let v = gaussian_vec(&mut rng, self.cfg.dim, 1.0);
            if let Ok(u) = numkit::normalize(&v) {
                return u;
            }
        }
    }

    /// Content tokens, truncated and zero-padded to `max_len`.
    ///
    /// `synth:` references and non-text styles use the provider's patch
    /// tokens; text and transcripts use hashed token vectors.
    pub fn tokenize(&self, q: &Query, provider: &dyn Embedder) -> Result<Vec<Vec<f64>>, EncodeError> {
        let d = self.cfg.dim;
        let from_patches = q.payload.synth_ref().is_some() || !q.style.is_textual();
        let mut out = match (from_patches, provider.patches(q)) {
            (true, Some(patches)) => patches?,
            _ if q.style.is_textual() => {
                let text = q.payload.as_text().ok_or_else(|| {
                    EncodeError::Embed(EmbedError::UnsupportedStyle {
                        style: q.style,
                        provider: provider.name().to_string(),
                        reason: "payload is not valid UTF-8".into(),
                    })
                })?;
                split_tokens(text)
                    .iter()
                    .take(self.cfg.max_len)
                    .map(|t| self.token_vector(t))
                    .collect()
            }
            _ => {
                return Err(EncodeError::Embed(EmbedError::UnsupportedStyle {
                    style: q.style,
                    provider: provider.name().to_string(),
                    reason: "provider renders no patch tokens for this style".into(),
                }))
            }
        };
        if let Some(bad) = out.iter().find(|v| v.len() != d) {
            return Err(EncodeError::DimensionMismatch {
                expected: d,
                found: bad.len(),
            });
        }
        out.truncate(self.cfg.max_len);
        out.resize(self.cfg.max_len, vec![0.0; d]);
        Ok(out)
    }

    pub fn compose(&self, prompts: &[Vec<f64>], content: &[Vec<f64>]) -> Result<TokenSequence, EncodeError> {
        compose(&self.cls, prompts, content, self.cfg.token_num)
    }

    /// Encodes with the configured insertion mode.
    pub fn encode(&self, seq: &TokenSequence) -> Result<Vec<f64>, EncodeError> {
        Ok(self.encode_traced(seq, self.cfg.insertion)?.output)
    }

    pub fn encode_with(&self, seq: &TokenSequence, insertion: Insertion) -> Result<Vec<f64>, EncodeError> {
        Ok(self.encode_traced(seq, insertion)?.output)
    }

    pub fn encode_traced(&self, seq: &TokenSequence, insertion: Insertion) -> Result<EncodeTrace, EncodeError> {
        let d = self.cfg.dim;
        if let Some(bad) = seq.tokens.iter().chain(&seq.prompts).find(|v| v.len() != d) {
            return Err(EncodeError::DimensionMismatch {
                expected: d,
                found: bad.len(),
            });
        }
        let n_prompt_tok = seq.prompt_tokens();
        if seq.tokens.len() < 1 + n_prompt_tok {
            return Err(EncodeError::InvalidConfig("sequence shorter than its prompt layout".into()));
        }
        // unmasked rows: CLS, prompt tokens, non-zero content
        let mut x: Vec<f64> = Vec::with_capacity(seq.tokens.len() * d);
        for (i, t) in seq.tokens.iter().enumerate() {
            if i <= n_prompt_tok || t.iter().any(|&v| v != 0.0) {
                x.extend_from_slice(t);
            }
        }
        let n = x.len() / d;
        let mut traces = Vec::with_capacity(self.layers.len());
        for (l, w) in self.layers.iter().enumerate() {
            if l > 0 && insertion == Insertion::Deep {
                for (pi, p) in seq.prompts.iter().enumerate() {
                    for t in 0..seq.token_num {
                        let row = 1 + pi * seq.token_num + t;
                        x[row * d..(row + 1) * d].copy_from_slice(p);
                    }
                }
            }
            let rows = if l + 1 == self.layers.len() { 1 } else { n };
            let (y, tr) = self.layer_forward(w, x, n, rows);
            traces.push(tr);
            x = y;
        }
        let raw = &x[..d];
        let raw_norm = numkit::norm(raw);
        let output = numkit::normalize(raw)?;
        Ok(EncodeTrace {
            layers: traces,
            n_prompts: seq.prompts.len(),
            token_num: seq.token_num,
            insertion,
            raw_norm,
            output,
        })
    }

    fn layer_forward(&self, w: &LayerWeights, x: Vec<f64>, n: usize, rows: usize) -> (Vec<f64>, LayerTrace) {
        let d = self.cfg.dim;
        let mut q = vec![0.0; rows * d];
        let mut attn = vec![0.0; rows * n];
        let mut act = vec![0.0; rows * d];
        let mut y = vec![0.0; rows * d];
        let mut h = vec![0.0; d];
        let mut z = vec![0.0; d];
        for i in 0..rows {
            let xi = &x[i * d..(i + 1) * d];
            let qi = &mut q[i * d..(i + 1) * d];
            w.attention.vecmat_into(xi, qi);
            let ai = &mut attn[i * n..(i + 1) * n];
            for (j, s) in ai.iter_mut().enumerate() {
                *s = numkit::dot(qi, &x[j * d..(j + 1) * d]);
            }
            let m = ai.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in ai.iter_mut() {
                *s = (*s - m).exp();
                sum += *s;
            }
            h.iter_mut().for_each(|v| *v = 0.0);
            for (j, s) in ai.iter_mut().enumerate() {
                *s /= sum;
                numkit::axpy(*s, &x[j * d..(j + 1) * d], &mut h);
            }
            w.channel.vecmat_into(&h, &mut z);
            for c in 0..d {
                let t = self.cfg.activation.apply(z[c]);
                act[i * d + c] = t;
                y[i * d + c] = xi[c] + t;
            }
        }
        (y, LayerTrace { x, rows, q, attn, act })
    }

    /// Gradients of a scalar loss with respect to the distinct prompts of the
    /// traced sequence, given `grad_out = ∂L/∂output`. Content tokens and
    /// CLS are frozen inputs and receive nothing.
    pub fn backward_prompts(&self, trace: &EncodeTrace, grad_out: &[f64]) -> Vec<Vec<f64>> {
        let d = self.cfg.dim;
        let mut g_prompts = vec![vec![0.0; d]; trace.n_prompts];
        let n_prompt_tok = trace.n_prompts * trace.token_num;

        // through the final normalization
        let o = &trace.output;
        let og = numkit::dot(o, grad_out);
        let mut gy: Vec<f64> = grad_out
            .iter()
            .zip(o)
            .map(|(g, oi)| (g - oi * og) / trace.raw_norm)
            .collect();

        for (l, (w, tr)) in self.layers.iter().zip(&trace.layers).enumerate().rev() {
            let n = tr.x.len() / d;
            let mut gx = self.layer_backward(w, tr, &gy, n);
            let reinjected = l == 0 || trace.insertion == Insertion::Deep;
            if reinjected {
                for (pi, gp) in g_prompts.iter_mut().enumerate() {
                    for t in 0..trace.token_num {
                        let row = 1 + pi * trace.token_num + t;
                        numkit::axpy(1.0, &gx[row * d..(row + 1) * d], gp);
                        if l > 0 {
                            gx[row * d..(row + 1) * d].iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                }
            }
            debug_assert!(n >= 1 + n_prompt_tok);
            gy = gx;
        }
        g_prompts
    }

    /// `gy` covers the `tr.rows` computed output rows; returns `∂L/∂x`, `n × d`.
    fn layer_backward(&self, w: &LayerWeights, tr: &LayerTrace, gy: &[f64], n: usize) -> Vec<f64> {
        let d = self.cfg.dim;
        let x = &tr.x;
        let mut gx = vec![0.0; n * d];
        let mut gz = vec![0.0; d];
        let mut gh = vec![0.0; d];
        let mut ga = vec![0.0; n];
        let mut gq = vec![0.0; d];
        let mut tmp = vec![0.0; d];
        for i in 0..tr.rows {
            let gyi = &gy[i * d..(i + 1) * d];
            numkit::axpy(1.0, gyi, &mut gx[i * d..(i + 1) * d]);
            for c in 0..d {
                gz[c] = gyi[c] * self.cfg.activation.slope_from_output(tr.act[i * d + c]);
            }
            w.channel.matvec_into(&gz, &mut gh);
            let ai = &tr.attn[i * n..(i + 1) * n];
            let mut mean = 0.0;
            for j in 0..n {
                let xj = &x[j * d..(j + 1) * d];
                ga[j] = numkit::dot(&gh, xj);
                mean += ai[j] * ga[j];
                numkit::axpy(ai[j], &gh, &mut gx[j * d..(j + 1) * d]);
            }
            let qi = &tr.q[i * d..(i + 1) * d];
            gq.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..n {
                let gs = ai[j] * (ga[j] - mean);
                if gs != 0.0 {
                    numkit::axpy(gs, &x[j * d..(j + 1) * d], &mut gq);
                    numkit::axpy(gs, qi, &mut gx[j * d..(j + 1) * d]);
                }
            }
            w.attention.matvec_into(&gq, &mut tmp);
            numkit::axpy(1.0, &tmp, &mut gx[i * d..(i + 1) * d]);
        }
        gx
    }
}
