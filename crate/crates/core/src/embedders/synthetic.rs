use std::collections::BTreeMap;

use super::{EmbedError, Embedder, EmbedderConfig, Embedding, Query, Style, StyleTag, SynthRef};
use crate::numkit::{self, Mat};
use crate::seeding::{self, fnv1a, gaussian_mat, gaussian_vec, rng_for, tag};

/// Relative jitter between the patch tokens of one item.
const PATCH_JITTER: f64 = 0.25;

/// Seeded concept/style generator.
///
/// An item `(concept c, style s, draw k)` embeds to
/// `normalize(T_s · base(c) + σ·ε(c, s, k))`, where `base(c)` is a seeded unit
/// Gaussian direction, `T_s` an orthogonal style transform and `ε` a
/// `N(0, 1/d)` draw. Payloads that are not `synth:` references are hashed to
/// a concept with draw 0.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    dim: usize,
    seed: u64,
    noise_scale: f64,
    patch_count: usize,
    config_hash: u64,
    transforms: BTreeMap<Style, Mat>,
}

impl SyntheticProvider {
    pub fn new(cfg: &EmbedderConfig) -> Result<Self, EmbedError> {
        cfg.validate()?;
        let d = cfg.dimension;
        let transforms = Style::ALL
            .into_iter()
            .map(|s| {
                let mut rng = rng_for(cfg.seed, &[tag("style-transform"), s.index()]);
                let g = gaussian_mat(&mut rng, d, d, cfg.style_strength / (d as f64).sqrt());
                let mut m = Mat::identity(d);
                for (dst, src) in m.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *dst += src;
                }
                (s, seeding::orthonormalize(&m))
            })
            .collect();
        Ok(Self {
            dim: d,
            seed: cfg.seed,
            noise_scale: cfg.noise_scale,
            patch_count: cfg.patch_count,
            config_hash: cfg.config_hash(),
            transforms,
        })
    }

    pub fn transform(&self, style: Style) -> &Mat {
        &self.transforms[&style]
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise_scale
    }

    /// Unit concept direction `base(c)`.
    pub fn base(&self, concept: u64) -> Vec<f64> {
        let mut rng = rng_for(self.seed, &[tag("concept"), concept]);
        loop {
            let v = gaussian_vec(&mut rng, self.dim, 1.0);
            if let Ok(u) = numkit::normalize(&v) {
                return u;
            }
        }
    }

    /// Raw noise draw `ε(c, s, k)` with entries `N(0, 1/d)` (before `σ`).
    pub fn noise(&self, r: SynthRef, style: Style) -> Vec<f64> {
        let mut rng = rng_for(self.seed, &[tag("noise"), r.concept, style.index(), r.draw]);
        gaussian_vec(&mut rng, self.dim, 1.0 / (self.dim as f64).sqrt())
    }

    /// `T_s · base(c) + σ·ε`, unnormalized.
    pub fn raw_vector(&self, r: SynthRef, style: Style) -> Vec<f64> {
        let base = self.base(r.concept);
        let mut v = self.transforms[&style]
            .matvec(&base)
            .expect("transform is d x d");
        if self.noise_scale > 0.0 {
            numkit::axpy(self.noise_scale, &self.noise(r, style), &mut v);
        }
        v
    }

    pub fn resolve(&self, q: &Query) -> SynthRef {
        q.payload.synth_ref().unwrap_or_else(|| SynthRef {
            concept: fnv1a(q.payload.as_bytes()),
            draw: 0,
        })
    }
}

impl Embedder for SyntheticProvider {
    fn name(&self) -> &str {
        "synthetic"
    }

    fn dimension(&self) -> usize {
        self.dim
    }

    fn config_hash(&self) -> u64 {
        self.config_hash
    }

    fn embed(&self, q: &Query) -> Result<Embedding, EmbedError> {
        let r = self.resolve(q);
        Embedding::from_raw(&self.raw_vector(r, q.style), StyleTag::Single(q.style), self.name())
    }

    fn patches(&self, q: &Query) -> Option<Result<Vec<Vec<f64>>, EmbedError>> {
        let r = self.resolve(q);
        let center = self.raw_vector(r, q.style);
        let scale = PATCH_JITTER / (self.dim as f64).sqrt();
        let out = (0..self.patch_count)
            .map(|j| {
                let mut rng = rng_for(
                    self.seed,
                    &[tag("patch"), r.concept, q.style.index(), j as u64],
                );
                let mut p = center.clone();
                numkit::axpy(1.0, &gaussian_vec(&mut rng, self.dim, scale), &mut p);
                numkit::normalize(&p).map_err(EmbedError::from)
            })
            .collect();
        Some(out)
    }

    fn param_checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        for m in self.transforms.values() {
            for x in m.as_slice() {
                h.update(&x.to_le_bytes());
            }
        }
        h.update(&self.seed.to_le_bytes());
        h.update(&self.noise_scale.to_le_bytes());
        h.finalize()
    }
}
