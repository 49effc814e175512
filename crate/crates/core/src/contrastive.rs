//! Multi-Similarity loss over informative pairs, hard-negative batch sampling
//! and a projected-gradient optimizer that trains embedding rows directly.
//!
//! For an anchor `i` with positive candidates `P` and negative candidates `N`
//! (cosines `S_ik`):
//!
//! ```text
//! NI = { j in N : S_ij > min_{k in P} S_ik - eps }
//! PI = { j in P : S_ij < max_{k in N} S_ik + eps }
//! L  = 1/m sum_i  1/alpha log(1 + sum_{PI} exp(-alpha (S - mu)))
//!               + 1/beta  log(1 + sum_{NI} exp( beta  (S - mu)))
//! ```

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, EmbeddingMatrix, TermId};
use crate::simindex::{SimIndex, SimIndexError};

#[derive(Debug, Error)]
pub enum ContrastiveError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite similarity {value} for anchor {anchor}")]
    NonFinite { anchor: TermId, value: f64 },
    #[error("loss needs at least one anchor")]
    EmptyBatch,
    #[error("anchor {0} has no concept label")]
    Unlabeled(TermId),
    #[error("anchor {0} has no synonyms to draw positives from")]
    NoSynonyms(TermId),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Index(#[from] SimIndexError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Loss hyperparameters. The defaults are the usual Multi-Similarity settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub mu: f64,
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 50.0,
            mu: 0.5,
            epsilon: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), ContrastiveError> {
        let finite = [self.alpha, self.beta, self.mu, self.epsilon]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.alpha <= 0.0 || self.beta <= 0.0 || self.epsilon < 0.0 {
            return Err(ContrastiveError::Config(format!(
                "need alpha > 0, beta > 0, epsilon >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Cosines of one anchor against its candidate slots.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBlock {
    pub anchor: TermId,
    pub positives: Vec<(TermId, f64)>,
    pub negatives: Vec<(TermId, f64)>,
}

/// Informative candidates of one anchor, as slot indices into the
/// corresponding [`SimilarityBlock`]. Slots rather than ids, because
/// positives drawn with replacement can repeat a term.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct InformativeSets {
    pub anchor: TermId,
    pub negatives: Vec<usize>,
    pub positives: Vec<usize>,
    /// False when the positive pool was empty, leaving `NI` undefined.
    pub negatives_defined: bool,
    /// False when the negative pool was empty, leaving `PI` undefined.
    pub positives_defined: bool,
}

impl InformativeSets {
    pub fn negative_ids<'a>(&'a self, block: &'a SimilarityBlock) -> impl Iterator<Item = TermId> + 'a {
        self.negatives.iter().map(|&s| block.negatives[s].0)
    }

    pub fn positive_ids<'a>(&'a self, block: &'a SimilarityBlock) -> impl Iterator<Item = TermId> + 'a {
        self.positives.iter().map(|&s| block.positives[s].0)
    }

    pub fn is_empty(&self) -> bool {
        self.negatives.is_empty() && self.positives.is_empty()
    }
}

/// Selects the informative negatives and positives of `block` (strict inequalities).
pub fn mine_informative_sets(block: &SimilarityBlock, epsilon: f64) -> InformativeSets {
    let min_pos = block.positives.iter().map(|p| p.1).reduce(f64::min);
    let max_neg = block.negatives.iter().map(|n| n.1).reduce(f64::max);
    let negatives = match min_pos {
        Some(lo) => (0..block.negatives.len())
            .filter(|&j| block.negatives[j].1 > lo - epsilon)
            .collect(),
        None => Vec::new(),
    };
    let positives = match max_neg {
        Some(hi) => (0..block.positives.len())
            .filter(|&j| block.positives[j].1 < hi + epsilon)
            .collect(),
        None => Vec::new(),
    };
    InformativeSets {
        anchor: block.anchor,
        negatives,
        positives,
        negatives_defined: min_pos.is_some(),
        positives_defined: max_neg.is_some(),
    }
}

/// `dL/dS` for every candidate slot of one anchor. Non-informative slots are 0.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BlockGradient {
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub gradients: Vec<BlockGradient>,
}

/// `log(1 + sum exp(x))` and the softmax weights `exp(x_k) / (1 + sum exp(x))`.
fn log1p_sum_exp(xs: &[f64]) -> (f64, Vec<f64>) {
    if xs.is_empty() {
        return (0.0, Vec::new());
    }
    let shift = xs.iter().copied().fold(0.0f64, f64::max);
    let scaled: Vec<f64> = xs.iter().map(|&x| (x - shift).exp()).collect();
    let tail: f64 = scaled.iter().sum();
    let (value, denom) = if shift == 0.0 {
        (tail.ln_1p(), 1.0 + tail)
    } else {
        let d = (-shift).exp() + tail;
        (shift + d.ln(), d)
    };
    (value, scaled.into_iter().map(|s| s / denom).collect())
}

/// Mean Multi-Similarity loss over the batch and its analytic gradient with
/// respect to every similarity in the blocks.
pub fn ms_loss(
    batch: &[(SimilarityBlock, InformativeSets)],
    config: &LossConfig,
) -> Result<LossOutput, ContrastiveError> {
    config.validate()?;
    if batch.is_empty() {
        return Err(ContrastiveError::EmptyBatch);
    }
    let m = batch.len() as f64;
    let mut loss = 0.0;
    let mut gradients = Vec::with_capacity(batch.len());
    for (block, sets) in batch {
        for &(_, s) in block.positives.iter().chain(&block.negatives) {
            if !s.is_finite() {
                return Err(ContrastiveError::NonFinite {
                    anchor: block.anchor,
                    value: s,
                });
            }
        }
        let mut grad = BlockGradient {
            positives: vec![0.0; block.positives.len()],
            negatives: vec![0.0; block.negatives.len()],
        };

        let pos_x: Vec<f64> = sets
            .positives
            .iter()
            .map(|&k| -config.alpha * (block.positives[k].1 - config.mu))
            .collect();
        let (pos_term, pos_w) = log1p_sum_exp(&pos_x);
        for (&k, w) in sets.positives.iter().zip(pos_w) {
            grad.positives[k] -= w / m;
        }

        let neg_x: Vec<f64> = sets
            .negatives
            .iter()
            .map(|&k| config.beta * (block.negatives[k].1 - config.mu))
            .collect();
        let (neg_term, neg_w) = log1p_sum_exp(&neg_x);
        for (&k, w) in sets.negatives.iter().zip(neg_w) {
            grad.negatives[k] += w / m;
        }

        loss += pos_term / config.alpha + neg_term / config.beta;
        gradients.push(grad);
    }
    Ok(LossOutput {
        loss: loss / m,
        gradients,
    })
}

/// One anchor with its positive and hard-negative candidates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchEntry {
    pub anchor: TermId,
    pub positives: Vec<TermId>,
    pub negatives: Vec<TermId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TrainBatch {
    pub entries: Vec<BatchEntry>,
}

/// Seeded form of [`sample_entry`].
pub fn sample_batch(
    corpus: &Corpus,
    index: &SimIndex,
    anchor: TermId,
    n_pos: usize,
    n_neg: usize,
    rng_seed: u64,
) -> Result<BatchEntry, ContrastiveError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    sample_entry(corpus, index, anchor, n_pos, n_neg, &mut rng)
}

/// Draws `n_pos` same-concept positives (with replacement only when the
/// concept is too small) and takes the `n_neg` most similar labeled terms of
/// other concepts from `index` as negatives.
pub fn sample_entry<R: Rng + ?Sized>(
    corpus: &Corpus,
    index: &SimIndex,
    anchor: TermId,
    n_pos: usize,
    n_neg: usize,
    rng: &mut R,
) -> Result<BatchEntry, ContrastiveError> {
    let record = corpus.term(anchor)?;
    let concept = record
        .concept_id
        .as_deref()
        .ok_or(ContrastiveError::Unlabeled(anchor))?;
    let pool: Vec<TermId> = corpus
        .members_of(concept)
        .iter()
        .copied()
        .filter(|&t| t != anchor)
        .collect();
    if pool.is_empty() && n_pos > 0 {
        return Err(ContrastiveError::NoSynonyms(anchor));
    }
    let positives = if pool.len() >= n_pos {
        rand::seq::index::sample(rng, pool.len(), n_pos)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..n_pos).map(|_| pool[rng.gen_range(0..pool.len())]).collect()
    };
    let label = corpus.label(anchor);
    let negatives = index
        .top_k_filtered(anchor, n_neg, |id| {
            let other = corpus.label(id);
            other.is_some() && other != label
        })?
        .ids()
        .collect();
    Ok(BatchEntry {
        anchor,
        positives,
        negatives,
    })
}

/// Current cosines of an entry's pairs.
pub fn similarity_block(embeddings: &EmbeddingMatrix, entry: &BatchEntry) -> SimilarityBlock {
    let sims = |ids: &[TermId]| -> Vec<(TermId, f64)> {
        ids.iter()
            .map(|&j| (j, embeddings.dot(entry.anchor, j)))
            .collect()
    };
    SimilarityBlock {
        anchor: entry.anchor,
        positives: sims(&entry.positives),
        negatives: sims(&entry.negatives),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub loss: LossConfig,
    pub n_pos: usize,
    pub n_neg: usize,
    pub steps: usize,
    /// Rebuild the similarity index every this many steps.
    pub refresh_every: usize,
    pub lr: f64,
    pub anchors_per_step: usize,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            n_pos: 15,
            n_neg: 15,
            steps: 10_000,
            refresh_every: 1_000,
            lr: 0.05,
            anchors_per_step: 2,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), ContrastiveError> {
        self.loss.validate()?;
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(ContrastiveError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.refresh_every == 0 {
            return Err(ContrastiveError::Config("refresh_every must be positive".into()));
        }
        if self.anchors_per_step == 0 {
            return Err(ContrastiveError::Config("anchors_per_step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub embeddings: EmbeddingMatrix,
    /// Loss of each step, measured before that step's update.
    pub trace: Vec<f64>,
    pub index_rebuilds: usize,
}

/// Anchors visited in seeded-shuffled epochs.
struct AnchorSchedule {
    anchors: Vec<TermId>,
    queue: Vec<TermId>,
}

impl AnchorSchedule {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> TermId {
        if self.queue.is_empty() {
            self.queue = self.anchors.clone();
            self.queue.shuffle(rng);
            self.queue.reverse();
        }
        self.queue.pop().expect("non-empty schedule")
    }
}

pub fn optimize_embeddings(
    corpus: &Corpus,
    config: &OptimizerConfig,
) -> Result<OptimizeOutcome, ContrastiveError> {
    optimize_embeddings_with(corpus, config, |_, _| {})
}

/// Runs the optimizer, calling `observe(step, embeddings)` after every update.
pub fn optimize_embeddings_with<F>(
    corpus: &Corpus,
    config: &OptimizerConfig,
    mut observe: F,
) -> Result<OptimizeOutcome, ContrastiveError>
where
    F: FnMut(usize, &EmbeddingMatrix),
{
    config.validate()?;
    let mut embeddings = corpus.embeddings()?.clone();
    if config.steps == 0 {
        return Ok(OptimizeOutcome {
            embeddings,
            trace: Vec::new(),
            index_rebuilds: 0,
        });
    }
    let anchors: Vec<TermId> = corpus
        .concept_index()
        .values()
        .filter(|m| m.len() > 1)
        .flatten()
        .copied()
        .collect();
    if anchors.is_empty() {
        return Err(ContrastiveError::Config(
            "no labeled concept has two or more terms".into(),
        ));
    }
    let mut anchors = anchors;
    anchors.sort_unstable();
    let mut schedule = AnchorSchedule {
        anchors,
        queue: Vec::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut index = SimIndex::from_matrix(embeddings.clone());
    let mut index_rebuilds = 0;
    let mut trace = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        if step > 0 && step % config.refresh_every == 0 {
            index = SimIndex::from_matrix(embeddings.clone());
            index_rebuilds += 1;
        }
        let mut batch = Vec::with_capacity(config.anchors_per_step);
        for _ in 0..config.anchors_per_step {
            let anchor = schedule.next(&mut rng);
            let entry = sample_entry(corpus, &index, anchor, config.n_pos, config.n_neg, &mut rng)?;
            let block = similarity_block(&embeddings, &entry);
            let sets = mine_informative_sets(&block, config.loss.epsilon);
            batch.push((block, sets));
        }
        let out = ms_loss(&batch, &config.loss)?;
        trace.push(out.loss);

        let dim = embeddings.dim();
        let mut grads: BTreeMap<TermId, Vec<f64>> = BTreeMap::new();
        let mut accumulate = |row: TermId, other: TermId, g: f64, emb: &EmbeddingMatrix| {
            let acc = grads.entry(row).or_insert_with(|| vec![0.0; dim]);
            for (a, &x) in acc.iter_mut().zip(emb.row(other)) {
                *a += g * f64::from(x);
            }
        };
        for ((block, _), grad) in batch.iter().zip(&out.gradients) {
            let pairs = block
                .positives
                .iter()
                .zip(&grad.positives)
                .chain(block.negatives.iter().zip(&grad.negatives));
            for (&(other, _), &g) in pairs {
                if g != 0.0 {
                    accumulate(block.anchor, other, g, &embeddings);
                    accumulate(other, block.anchor, g, &embeddings);
                }
            }
        }
        for (row, g) in grads {
            let updated: Vec<f64> = embeddings
                .row(row)
                .iter()
                .zip(&g)
                .map(|(&x, &d)| f64::from(x) - config.lr * d)
                .collect();
            embeddings.set_row(row, &updated)?;
        }
        observe(step, &embeddings);
    }
    Ok(OptimizeOutcome {
        embeddings,
        trace,
        index_rebuilds,
    })
}

/// Writes the trace as `step,loss` CSV.
pub fn write_loss_trace<W: Write>(mut w: W, trace: &[f64]) -> std::io::Result<()> {
    writeln!(w, "step,loss")?;
    for (step, loss) in trace.iter().enumerate() {
        writeln!(w, "{step},{loss}")?;
    }
    w.flush()
}
