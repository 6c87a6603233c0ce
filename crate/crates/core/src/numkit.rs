//! Dense numeric kernels shared by every other module.
//!
//! Vectors are plain `f64` slices; [`Mat`] is a small row-major matrix. All
//! routines are pure and allocation-light, which keeps them safe to call from
//! any number of threads.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Norms below this are treated as zero.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NumError {
    #[error("vector norm below {NORM_FLOOR:e}")]
    ZeroVector,
    #[error("empty input")]
    EmptyInput,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value encountered")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, NumError>;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(NumError::ShapeMismatch(format!(
            "vector lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// Returns `a / ||a||`.
pub fn normalize(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if !n.is_finite() {
        return Err(NumError::NonFinite);
    }
    if n < NORM_FLOOR {
        return Err(NumError::ZeroVector);
    }
    Ok(a.iter().map(|x| x / n).collect())
}

/// Cosine similarity `a·b / (||a||·||b||)`.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b)?;
    let na = norm(a);
    let nb = norm(b);
    if na < NORM_FLOOR || nb < NORM_FLOOR {
        return Err(NumError::ZeroVector);
    }
    // Rounding can push |cos| a hair past 1 for parallel inputs.
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine distance `1 − cosine_sim(a, b)`, in `[0, 2]`.
pub fn cosine_dist(a: &[f64], b: &[f64]) -> Result<f64> {
    cosine_sim(a, b).map(|c| 1.0 - c)
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(NumError::EmptyInput);
    }
    if !all_finite(logits) {
        return Err(NumError::NonFinite);
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(NumError::ShapeMismatch(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if !all_finite(&data) {
            return Err(NumError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&x| x == 0.0)
    }

    /// Row vector times matrix: `v · M`, a vector of length `cols`.
    pub fn vecmat(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(NumError::ShapeMismatch(format!(
                "row vector of length {} times {}x{} matrix",
                v.len(),
                self.rows,
                self.cols
            )));
        }
        let mut out = vec![0.0; self.cols];
        self.vecmat_into(v, &mut out);
        Ok(out)
    }

    /// Unchecked `v · M` into `out`; lengths are debug-asserted.
    #[inline]
    pub fn vecmat_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (r, &vr) in v.iter().enumerate() {
            if vr != 0.0 {
                axpy(vr, self.row(r), out);
            }
        }
    }

    /// Matrix times column vector: `M · v`, a vector of length `rows`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(NumError::ShapeMismatch(format!(
                "{}x{} matrix times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.rows];
        self.matvec_into(v, &mut out);
        Ok(out)
    }

    #[inline]
    pub fn matvec_into(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), v);
        }
    }

    /// `self += alpha * u ⊗ v` (outer product, `u` over rows, `v` over columns).
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        let cols = self.cols;
        for (r, &ur) in u.iter().enumerate() {
            if ur != 0.0 {
                axpy(alpha * ur, v, &mut self.data[r * cols..(r + 1) * cols]);
            }
        }
    }
}

/// `(p · M1) · M2` without materializing the `d×d` product `M1·M2`.
pub fn rowvec_matmul(p: &[f64], m1: &Mat, m2: &Mat) -> Result<Vec<f64>> {
    if m1.cols() != m2.rows() {
        return Err(NumError::ShapeMismatch(format!(
            "inner dimensions {} and {}",
            m1.cols(),
            m2.rows()
        )));
    }
    let low = m1.vecmat(p)?;
    m2.vecmat(&low)
}
