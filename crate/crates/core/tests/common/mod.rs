#![allow(dead_code)]

pub mod oracles;
pub mod tolerances;

use std::path::PathBuf;

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

use promptrag::promptbank::BankConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            scale * z
        })
        .collect()
}

pub fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let v = gauss(rng, d, 1.0);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Scales of each parameter block for [`random_flat`].
#[derive(Debug, Clone, Copy)]
pub struct ParamScales {
    pub key: f64,
    pub prompt: f64,
    pub router: f64,
    pub down: f64,
    pub up: f64,
}

/// Gaussian parameters in the bank's flat layout.
pub fn random_flat(cfg: &BankConfig, rng: &mut ChaCha8Rng, s: ParamScales) -> Vec<f64> {
    let (n, d, k, r) = (cfg.entries, cfg.dim, cfg.experts, cfg.rank);
    let mut flat = Vec::new();
    flat.extend(gauss(rng, n * d, s.key));
    flat.extend(gauss(rng, n * d, s.prompt));
    flat.extend(gauss(rng, n * d * k, s.router));
    for _ in 0..n * k {
        flat.extend(gauss(rng, d * r, s.down));
        flat.extend(gauss(rng, r * d, s.up));
    }
    flat
}
