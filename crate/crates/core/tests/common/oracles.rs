//! Brute-force reference implementations used only by tests.
//!
//! They read nothing but public data (configs, flat parameter vectors, frozen
//! weights, token vectors) and recompute everything with plain nested loops:
//! dense LoRA matrices instead of the low-rank path, rank counting instead of
//! sorting, every encoder row at every layer.

use std::fmt::Debug;
use std::ops::{Add, Mul, Neg, Sub};

use promptrag::encoder::{Activation, FrozenEncoder, Insertion};
use promptrag::promptbank::BankConfig;
use twofloat::TwoFloat;

pub type Vector<R = f64> = Vec<R>;
/// Row-major, `m[row][col]`.
pub type Matrix<R = f64> = Vec<Vec<R>>;

/// Scalar the oracles compute in: `f64`, or double-double [`TwoFloat`] when
/// finite differences need rounding noise far below one `f64` ulp of the loss.
pub trait Real:
    Copy
    + Debug
    + PartialOrd
    + From<f64>
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Neg<Output = Self>
{
    fn quot(self, d: Self) -> Self;
    fn exp(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn to_f64(self) -> f64;
    fn finite(self) -> bool;
}

impl Real for f64 {
    fn quot(self, d: Self) -> Self {
        self / d
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn finite(self) -> bool {
        self.is_finite()
    }
}

impl Real for TwoFloat {
    fn quot(self, d: Self) -> Self {
        dd_div(self, d)
    }
    fn exp(self) -> Self {
        dd_exp(self)
    }
    fn tanh(self) -> Self {
        let (p, m) = (dd_exp(self), dd_exp(-self));
        dd_div(p - m, p + m)
    }
    fn sqrt(self) -> Self {
        TwoFloat::sqrt(self)
    }
    fn to_f64(self) -> f64 {
        self.hi() + self.lo()
    }
    fn finite(self) -> bool {
        self.hi().is_finite() && self.lo().is_finite()
    }
}

/// `a / b` in double-double by three residual corrections. `TwoFloat`'s own
/// division is only good to about one `f64` ulp.
fn dd_div(a: TwoFloat, b: TwoFloat) -> TwoFloat {
    let q1 = a.hi() / b.hi();
    let r = a - b * q1;
    let q2 = r.hi() / b.hi();
    let r = r - b * q2;
    let q3 = r.hi() / b.hi();
    TwoFloat::new_add(q1, q2) + q3
}

/// `exp` in double-double as `(Σ_{n<24} (x/2^10)^n / n!)^(2^10)`.
///
/// There is no argument-dependent branch, so the result is smooth in `x`.
/// `TwoFloat::exp` switches its range reduction at multiples of ln 2, and the
/// f64-sized jumps there show up in finite differences.
fn dd_exp(x: TwoFloat) -> TwoFloat {
    let y = dd_div(x, TwoFloat::from(1024.0));
    let mut term = TwoFloat::from(1.0);
    let mut s = term;
    for n in 1..24 {
        term = dd_div(term * y, TwoFloat::from(n as f64));
        s = s + term;
    }
    for _ in 0..10 {
        s = s * s;
    }
    s
}

fn zero<R: Real>() -> R {
    R::from(0.0)
}

fn cast<R: Real>(v: &[f64]) -> Vector<R> {
    v.iter().map(|&x| R::from(x)).collect()
}

fn cast_matrix<R: Real>(m: &Matrix) -> Matrix<R> {
    m.iter().map(|r| cast(r)).collect()
}

/// One main-versus-oracle comparison with its tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub case: String,
    pub main: f64,
    pub oracle: f64,
    pub abs_err: f64,
    pub rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

impl OracleReport {
    /// Relative comparison, switching to an absolute one at `floor` when the
    /// oracle value is smaller than `floor`.
    pub fn relative(case: impl Into<String>, main: f64, oracle: f64, rel_tol: f64, floor: f64) -> Self {
        let abs_err = (main - oracle).abs();
        let rel_err = if oracle.abs() > 0.0 { abs_err / oracle.abs() } else { abs_err };
        let (tol, pass) = if oracle.abs() < floor {
            (floor, abs_err <= floor)
        } else {
            (rel_tol, rel_err <= rel_tol)
        };
        Self {
            case: case.into(),
            main,
            oracle,
            abs_err,
            rel_err,
            tol,
            pass: pass && main.is_finite(),
        }
    }

    pub fn absolute(case: impl Into<String>, main: f64, oracle: f64, tol: f64) -> Self {
        let abs_err = (main - oracle).abs();
        Self {
            case: case.into(),
            main,
            oracle,
            abs_err,
            rel_err: if oracle != 0.0 { abs_err / oracle.abs() } else { abs_err },
            tol,
            pass: abs_err <= tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NonFiniteLoss {
    pub coordinate: usize,
    pub value: f64,
}

/// `(L(θ + h·e_i) − L(θ − h·e_i)) / 2h` for every coordinate `i`.
pub fn fd_gradient(mut loss: impl FnMut(&[f64]) -> f64, params: &[f64], h: f64) -> Result<Vec<f64>, NonFiniteLoss> {
    let all: Vec<usize> = (0..params.len()).collect();
    fd_partials(|p: &[f64]| vec![loss(p)], params, h, &all)
}

/// [`fd_gradient`] of `L = Σ_t T_t` given the terms `T_t`. Each term is
/// differenced before summing, so terms a coordinate does not touch cancel
/// exactly instead of adding rounding noise at the scale of `L`.
pub fn fd_gradient_terms<R: Real>(
    terms: impl FnMut(&[R]) -> Vec<R>,
    params: &[R],
    h: f64,
) -> Result<Vec<f64>, NonFiniteLoss> {
    let all: Vec<usize> = (0..params.len()).collect();
    fd_partials(terms, params, h, &all)
}

/// Central differences of a sum of terms, restricted to `coords`.
pub fn fd_partials<R: Real>(
    mut terms: impl FnMut(&[R]) -> Vec<R>,
    params: &[R],
    h: f64,
    coords: &[usize],
) -> Result<Vec<f64>, NonFiniteLoss> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut theta = params.to_vec();
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let orig = theta[i];
        let (hi, lo) = (orig + R::from(h), orig - R::from(h));
        theta[i] = hi;
        let up = terms(&theta);
        theta[i] = lo;
        let down = terms(&theta);
        theta[i] = orig;
        for &value in up.iter().chain(&down) {
            if !value.finite() {
                return Err(NonFiniteLoss {
                    coordinate: i,
                    value: value.to_f64(),
                });
            }
        }
        let diff = up.iter().zip(&down).fold(zero::<R>(), |acc, (&u, &d)| acc + (u - d));
        // The representable step, not the nominal 2h.
        out.push(diff.quot(hi - lo).to_f64());
    }
    Ok(out)
}

fn dot<R: Real>(a: &[R], b: &[R]) -> R {
    let mut s = zero();
    for i in 0..a.len() {
        s = s + a[i] * b[i];
    }
    s
}

fn sum<R: Real>(xs: impl Iterator<Item = R>) -> R {
    xs.fold(zero(), |a, b| a + b)
}

fn max_of<R: Real>(xs: &[R]) -> R {
    xs.iter().skip(1).fold(xs[0], |m, &x| if x > m { x } else { m })
}

/// Cosine similarity clamped to `[-1, 1]`.
pub fn cosine<R: Real>(a: &[R], b: &[R]) -> R {
    let one = R::from(1.0);
    let c = dot(a, b).quot(dot(a, a).sqrt() * dot(b, b).sqrt());
    if c > one {
        one
    } else if c < -one {
        -one
    } else {
        c
    }
}

/// Position of `i` when `scores` is ordered best first, ties to the lower index.
fn rank_of<R: Real>(scores: &[R], i: usize) -> usize {
    (0..scores.len())
        .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
        .count()
}

/// Top-`n` keys by cosine to `q`, best first, by rank counting.
pub fn select_exhaustive<R: Real>(keys: &[Vector<R>], q: &[R], n: usize) -> Vec<usize> {
    let scores: Vec<R> = keys.iter().map(|k| cosine(q, k)).collect();
    let mut out = vec![usize::MAX; n.min(keys.len())];
    for i in 0..keys.len() {
        let r = rank_of(&scores, i);
        if r < out.len() {
            out[r] = i;
        }
    }
    out
}

/// Softmax of `probe · router`, top-`top_e` kept and renormalized.
pub fn route_exhaustive<R: Real>(router: &Matrix<R>, probe: &[R], top_e: usize) -> Vector<R> {
    let experts = router[0].len();
    let logits: Vec<R> = (0..experts)
        .map(|k| sum((0..probe.len()).map(|i| probe[i] * router[i][k])))
        .collect();
    let max = max_of(&logits);
    let e: Vec<R> = logits.iter().map(|&l| (l - max).exp()).collect();
    let z = sum(e.iter().copied());
    let p: Vec<R> = e.iter().map(|&v| v.quot(z)).collect();
    let kept: Vec<bool> = (0..experts).map(|k| rank_of(&p, k) < top_e).collect();
    let mass = sum((0..experts).filter(|&k| kept[k]).map(|k| p[k]));
    (0..experts).map(|k| if kept[k] { p[k].quot(mass) } else { zero() }).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseEntry<R = f64> {
    pub key: Vector<R>,
    pub prompt: Vector<R>,
    /// `d × K`
    pub router: Matrix<R>,
    /// Per expert, `d × r`.
    pub down: Vec<Matrix<R>>,
    /// Per expert, `r × d`.
    pub up: Vec<Matrix<R>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseBank<R = f64> {
    pub select: usize,
    pub top_experts: usize,
    pub entries: Vec<DenseEntry<R>>,
}

fn take_matrix<R: Real>(flat: &[R], pos: &mut usize, rows: usize, cols: usize) -> Matrix<R> {
    let m = (0..rows)
        .map(|i| flat[*pos + i * cols..*pos + (i + 1) * cols].to_vec())
        .collect();
    *pos += rows * cols;
    m
}

impl<R: Real> DenseBank<R> {
    /// Parses the documented flat layout: all keys, all prompts, all routers,
    /// then per entry and expert the down then up factor.
    pub fn from_flat(cfg: &BankConfig, flat: &[R]) -> Self {
        let (n, d, k, r) = (cfg.entries, cfg.dim, cfg.experts, cfg.rank);
        assert_eq!(flat.len(), n * (2 * d + d * k + k * 2 * d * r), "flat length");
        let mut pos = 0;
        let keys: Vec<Vector<R>> = (0..n).map(|_| take_matrix(flat, &mut pos, 1, d).remove(0)).collect();
        let prompts: Vec<Vector<R>> = (0..n).map(|_| take_matrix(flat, &mut pos, 1, d).remove(0)).collect();
        let routers: Vec<Matrix<R>> = (0..n).map(|_| take_matrix(flat, &mut pos, d, k)).collect();
        let mut entries = Vec::with_capacity(n);
        for (i, router) in routers.into_iter().enumerate() {
            let mut down = Vec::new();
            let mut up = Vec::new();
            for _ in 0..k {
                down.push(take_matrix(flat, &mut pos, d, r));
                up.push(take_matrix(flat, &mut pos, r, d));
            }
            entries.push(DenseEntry {
                key: keys[i].clone(),
                prompt: prompts[i].clone(),
                router,
                down,
                up,
            });
        }
        Self {
            select: cfg.select,
            top_experts: cfg.top_experts,
            entries,
        }
    }

    pub fn keys(&self) -> Vec<Vector<R>> {
        self.entries.iter().map(|e| e.key.clone()).collect()
    }
}

/// `P · (I + Σ_k α_k A_k B_k)` with each `A_k B_k` formed as a dense `d × d`.
pub fn dense_lora<R: Real>(entry: &DenseEntry<R>, top_e: usize) -> Vector<R> {
    let d = entry.prompt.len();
    let alpha = route_exhaustive(&entry.router, &entry.prompt, top_e);
    let mut w = vec![vec![zero::<R>(); d]; d];
    for (i, row) in w.iter_mut().enumerate() {
        row[i] = R::from(1.0);
    }
    for (k, &a) in alpha.iter().enumerate() {
        if a == zero() {
            continue;
        }
        let (down, up) = (&entry.down[k], &entry.up[k]);
        for i in 0..d {
            for j in 0..d {
                let mut s = zero();
                for t in 0..up.len() {
                    s = s + down[i][t] * up[t][j];
                }
                w[i][j] = w[i][j] + a * s;
            }
        }
    }
    (0..d).map(|j| sum((0..d).map(|i| entry.prompt[i] * w[i][j]))).collect()
}

/// Straight-line copy of the frozen encoder's weights.
#[derive(Debug, Clone)]
pub struct RefEncoder<R = f64> {
    pub cls: Vector<R>,
    pub attention: Vec<Matrix<R>>,
    pub channel: Vec<Matrix<R>>,
    pub token_num: usize,
    pub activation: Activation,
}

fn to_matrix(rows: usize, cols: usize, get: impl Fn(usize, usize) -> f64) -> Matrix {
    (0..rows).map(|i| (0..cols).map(|j| get(i, j)).collect()).collect()
}

fn vec_mat<R: Real>(v: &[R], m: &Matrix<R>) -> Vector<R> {
    (0..m[0].len()).map(|c| sum((0..v.len()).map(|a| v[a] * m[a][c]))).collect()
}

impl RefEncoder {
    pub fn from_encoder(e: &FrozenEncoder) -> Self {
        let d = e.config().dim;
        Self {
            cls: e.cls().to_vec(),
            attention: e.layers().iter().map(|w| to_matrix(d, d, |i, j| w.attention.get(i, j))).collect(),
            channel: e.layers().iter().map(|w| to_matrix(d, d, |i, j| w.channel.get(i, j))).collect(),
            token_num: e.config().token_num,
            activation: e.config().activation,
        }
    }

    /// The same weights in another scalar type.
    pub fn to<S: Real>(&self) -> RefEncoder<S> {
        RefEncoder {
            cls: cast(&self.cls),
            attention: self.attention.iter().map(cast_matrix).collect(),
            channel: self.channel.iter().map(cast_matrix).collect(),
            token_num: self.token_num,
            activation: self.activation,
        }
    }
}

impl<R: Real> RefEncoder<R> {
    fn act(&self, z: R) -> R {
        match self.activation {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Normalized CLS output for `[CLS] ++ prompts×token_num ++ content`,
    /// all-zero content tokens left out.
    pub fn encode(&self, prompts: &[Vector<R>], content: &[Vector<R>], insertion: Insertion) -> Vector<R> {
        let mut x: Vec<Vector<R>> = vec![self.cls.clone()];
        for p in prompts {
            for _ in 0..self.token_num {
                x.push(p.clone());
            }
        }
        x.extend(content.iter().filter(|t| t.iter().any(|&v| v != zero())).cloned());
        for l in 0..self.attention.len() {
            if l > 0 && insertion == Insertion::Deep {
                for (pi, p) in prompts.iter().enumerate() {
                    for t in 0..self.token_num {
                        x[1 + pi * self.token_num + t] = p.clone();
                    }
                }
            }
            let mut y = Vec::with_capacity(x.len());
            for xi in &x {
                let q = vec_mat(xi, &self.attention[l]);
                let s: Vec<R> = x.iter().map(|xj| dot(&q, xj)).collect();
                let m = max_of(&s);
                let e: Vec<R> = s.iter().map(|&v| (v - m).exp()).collect();
                let z = sum(e.iter().copied());
                let mut h = vec![zero::<R>(); xi.len()];
                for (j, xj) in x.iter().enumerate() {
                    for c in 0..h.len() {
                        h[c] = h[c] + e[j].quot(z) * xj[c];
                    }
                }
                let zc = vec_mat(&h, &self.channel[l]);
                y.push(xi.iter().zip(&zc).map(|(&a, &b)| a + self.act(b)).collect());
            }
            x = y;
        }
        let n = dot(&x[0], &x[0]).sqrt();
        x[0].iter().map(|&v| v.quot(n)).collect()
    }
}

/// A frozen-stage view of one item: its prototype embedding and content tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemInput<R = f64> {
    pub embedding: Vector<R>,
    pub content: Vec<Vector<R>>,
}

impl ItemInput {
    pub fn to<S: Real>(&self) -> ItemInput<S> {
        ItemInput {
            embedding: cast(&self.embedding),
            content: self.content.iter().map(|t| cast(t)).collect(),
        }
    }
}

/// Feature of one item and the entries it selected.
pub fn item_feature<R: Real>(
    bank: &DenseBank<R>,
    enc: &RefEncoder<R>,
    item: &ItemInput<R>,
    insertion: Insertion,
) -> (Vector<R>, Vec<usize>) {
    let sel = select_exhaustive(&bank.keys(), &item.embedding, bank.select);
    let prompts: Vec<Vector<R>> = sel.iter().map(|&i| dense_lora(&bank.entries[i], bank.top_experts)).collect();
    (enc.encode(&prompts, &item.content, insertion), sel)
}

/// Forward-only mean loss over `(anchor, positive, negative)` triplets:
/// hinge on cosine distances plus `λ ·` the anchor's key-alignment term.
pub fn model_loss<R: Real>(
    bank: &DenseBank<R>,
    enc: &RefEncoder<R>,
    triplets: &[(ItemInput<R>, ItemInput<R>, ItemInput<R>)],
    margin: f64,
    lambda: f64,
    insertion: Insertion,
) -> R {
    sum(model_loss_terms(bank, enc, triplets, margin, lambda, insertion).into_iter())
}

/// The terms of [`model_loss`], already divided by the batch size: per
/// triplet the hinge, then `λ (1 − cos)` for each selected key.
pub fn model_loss_terms<R: Real>(
    bank: &DenseBank<R>,
    enc: &RefEncoder<R>,
    triplets: &[(ItemInput<R>, ItemInput<R>, ItemInput<R>)],
    margin: f64,
    lambda: f64,
    insertion: Insertion,
) -> Vec<R> {
    let (one, m) = (R::from(1.0), R::from(triplets.len() as f64));
    let (margin, lambda) = (R::from(margin), R::from(lambda));
    let mut out = Vec::new();
    for (a, p, n) in triplets {
        let (f, sel) = item_feature(bank, enc, a, insertion);
        let (r, _) = item_feature(bank, enc, p, insertion);
        let (h, _) = item_feature(bank, enc, n, insertion);
        let hinge = margin + (one - cosine(&f, &r)) - (one - cosine(&f, &h));
        let hinge = if hinge > zero() { hinge } else { zero() };
        out.push(hinge.quot(m));
        for &i in &sel {
            out.push((lambda * (one - cosine(&a.embedding, &bank.entries[i].key))).quot(m));
        }
    }
    out
}

/// Top-`k` `(id, score)` by cosine, best first, ties to the lower id.
pub fn exhaustive_topk(items: &[(String, Vector)], q: &[f64], k: usize) -> Vec<(String, f64)> {
    let scores: Vec<f64> = items.iter().map(|(_, v)| cosine(q, v)).collect();
    let mut out: Vec<Option<(String, f64)>> = vec![None; k.min(items.len())];
    for i in 0..items.len() {
        let r = (0..items.len())
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && items[j].0 < items[i].0))
            .count();
        if r < out.len() {
            out[r] = Some((items[i].0.clone(), scores[i]));
        }
    }
    out.into_iter().map(|x| x.expect("ranks are a permutation")).collect()
}

/// Whether `truth` is among the first `k` of `ranked`.
pub fn recount_hit(ranked: &[String], truth: &str, k: usize) -> bool {
    ranked.iter().take(k).any(|id| id == truth)
}

/// Fraction of hits, 0 for no queries.
pub fn recount_recall(hits: &[bool]) -> f64 {
    if hits.is_empty() {
        return 0.0;
    }
    hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64
}
