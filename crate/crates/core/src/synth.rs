//! Labeled synthetic corpora on the unit sphere.
//!
//! Concepts get (near-)orthogonal centers; each term is
//! `sqrt(rho) * center + sqrt(1 - rho) * u` with `u` a random unit vector
//! orthogonal to the centers (all of them when there is room), so within-concept cosines concentrate near `rho`
//! and cross-concept cosines near 0.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, EmbeddingMatrix};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic corpus parameters: {0}")]
    Config(String),
    #[error("no draw met the cosine bands after {attempts} attempts (best: min intra {min_intra:.4}, max inter {max_inter:.4})")]
    Bands {
        attempts: usize,
        min_intra: f64,
        max_inter: f64,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub concepts: usize,
    pub terms_per_concept: usize,
    pub dim: usize,
    /// Every within-concept cosine must exceed this.
    pub intra_min: f64,
    /// Every cross-concept cosine must stay below this.
    pub inter_max: f64,
    pub seed: u64,
    pub max_attempts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            concepts: 10,
            terms_per_concept: 6,
            dim: 32,
            intra_min: 0.9,
            inter_max: 0.3,
            seed: 0,
            max_attempts: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    pub min_intra: f64,
    pub max_inter: f64,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn remove_component(v: &mut [f64], along: &[f64]) {
    let d: f64 = v.iter().zip(along).map(|(a, b)| a * b).sum();
    v.iter_mut().zip(along).for_each(|(x, a)| *x -= d * a);
}

/// Random unit directions, orthonormal when `count <= dim`.
fn centers(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for i in 0..count {
        let mut v = gaussian(rng, dim);
        if i < dim {
            for c in &out {
                remove_component(&mut v, c);
            }
        }
        normalize(&mut v);
        out.push(v);
    }
    out
}

fn concept_name(c: usize) -> String {
    format!("C{c:05}")
}

fn build(labels: &[usize], rows: Vec<f32>, dim: usize) -> Result<Corpus, SynthError> {
    let mut seen = vec![0usize; labels.iter().max().map_or(0, |m| m + 1)];
    let recs = labels.iter().enumerate().map(|(i, &c)| {
        let j = seen[c];
        seen[c] += 1;
        (i as u64, Some(concept_name(c)), format!("concept {c} variant {j}"))
    });
    let recs: Vec<_> = recs.collect();
    Ok(Corpus::from_records(recs)?.with_embeddings(EmbeddingMatrix::from_rows(dim, rows)?)?)
}

fn bands(corpus: &Corpus) -> Result<(f64, f64), CorpusError> {
    let m = corpus.embeddings()?;
    let mut min_intra = f64::INFINITY;
    let mut max_inter = f64::NEG_INFINITY;
    for a in 0..corpus.len() {
        for b in a + 1..corpus.len() {
            let s = m.dot(a, b);
            if corpus.label(a) == corpus.label(b) {
                min_intra = min_intra.min(s);
            } else {
                max_inter = max_inter.max(s);
            }
        }
    }
    Ok((min_intra, max_inter))
}

/// Generates a corpus whose cosines respect the configured bands, redrawing
/// with derived seeds until they do. Terms are ordered concept by concept.
pub fn generate(cfg: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    if cfg.dim == 0 || cfg.terms_per_concept == 0 || cfg.max_attempts == 0 {
        return Err(SynthError::Config(format!("{cfg:?}")));
    }
    if !(cfg.intra_min < 1.0 && cfg.inter_max > -1.0) {
        return Err(SynthError::Config("cosine bands outside (-1, 1)".into()));
    }
    let rho = 0.5 * (1.0 + cfg.intra_min.max(0.0));
    let labels: Vec<usize> = (0..cfg.concepts)
        .flat_map(|c| std::iter::repeat(c).take(cfg.terms_per_concept))
        .collect();
    let mut best = (f64::NEG_INFINITY, f64::INFINITY);
    for attempt in 0..cfg.max_attempts {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(attempt as u64 * 0x5851_F42D_4C95_7F2D));
        let cs = centers(&mut rng, cfg.concepts, cfg.dim);
        let mut rows = Vec::with_capacity(labels.len() * cfg.dim);
        for &c in &labels {
            let mut u = gaussian(&mut rng, cfg.dim);
            if cfg.concepts < cfg.dim {
                // keep the spread out of every concept direction
                for center in &cs {
                    remove_component(&mut u, center);
                }
            } else {
                remove_component(&mut u, &cs[c]);
            }
            normalize(&mut u);
            rows.extend(
                cs[c]
                    .iter()
                    .zip(&u)
                    .map(|(x, y)| (rho.sqrt() * x + (1.0 - rho).sqrt() * y) as f32),
            );
        }
        let corpus = build(&labels, rows, cfg.dim)?;
        let (min_intra, max_inter) = bands(&corpus)?;
        let intra_ok = cfg.terms_per_concept < 2 || min_intra > cfg.intra_min;
        let inter_ok = cfg.concepts < 2 || max_inter < cfg.inter_max;
        if intra_ok && inter_ok {
            return Ok(SynthCorpus {
                corpus,
                min_intra,
                max_inter,
            });
        }
        if min_intra - max_inter > best.0 - best.1 {
            best = (min_intra, max_inter);
        }
    }
    Err(SynthError::Bands {
        attempts: cfg.max_attempts,
        min_intra: best.0,
        max_inter: best.1,
    })
}

/// Concepts whose terms are all close to one shared direction: centers sit
/// at `spread` around a common base and terms add Gaussian `noise`.
/// Concepts overlap in cosine, so the contrastive loss starts out positive.
pub fn near_duplicates(
    concepts: usize,
    terms_per_concept: usize,
    dim: usize,
    spread: f64,
    noise: f64,
    seed: u64,
) -> Result<Corpus, SynthError> {
    if dim == 0 {
        return Err(SynthError::Config("dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut base = gaussian(&mut rng, dim);
    normalize(&mut base);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in 0..concepts {
        let mut offset = gaussian(&mut rng, dim);
        normalize(&mut offset);
        let center: Vec<f64> = base.iter().zip(&offset).map(|(b, o)| b + spread * o).collect();
        for _ in 0..terms_per_concept {
            let g = gaussian(&mut rng, dim);
            rows.extend(center.iter().zip(&g).map(|(x, n)| (x + noise * n) as f32));
            labels.push(c);
        }
    }
    build(&labels, rows, dim)
}
