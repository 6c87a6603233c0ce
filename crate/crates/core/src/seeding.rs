//! Deterministic sub-seed derivation.
//!
//! Every random draw in the crate goes through [`rng_for`], keyed by a root
//! seed and a short path of tags, so that draws are reproducible and
//! independent of call order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numkit::Mat;

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a root seed with a path of tags into one 64-bit seed.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_for(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}

/// FNV-1a over bytes; stable across platforms and releases.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Tag constant from a short ASCII label.
pub fn tag(label: &str) -> u64 {
    fnv1a(label.as_bytes())
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

pub fn gaussian_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

/// Orthonormalizes the columns of a square matrix (modified Gram–Schmidt).
///
/// Columns that collapse below the norm floor are replaced by the first
/// standard basis vector that is still independent, so the result is always
/// orthogonal.
pub fn orthonormalize(m: &Mat) -> Mat {
    let n = m.rows();
    assert_eq!(n, m.cols(), "orthonormalize needs a square matrix");
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| (0..n).map(|r| m.get(r, c)).collect()).collect();
    for c in 0..n {
        let mut attempt = 0usize;
        loop {
            for p in 0..c {
                let proj = crate::numkit::dot(&cols[c], &cols[p]);
                let prev = cols[p].clone();
                crate::numkit::axpy(-proj, &prev, &mut cols[c]);
            }
            let nrm = crate::numkit::norm(&cols[c]);
            if nrm > 1e-8 {
                cols[c].iter_mut().for_each(|x| *x /= nrm);
                break;
            }
            cols[c] = vec![0.0; n];
            cols[c][attempt % n] = 1.0;
            attempt += 1;
        }
    }
    Mat::from_fn(n, n, |r, c| cols[c][r])
}
