//! Pairwise evaluation: a pair of terms is a positive when both share a gold
//! concept. Predictions come either from a cosine threshold or from a
//! clustering (same cluster means positive).

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::birch::ClusterAssignment;
use crate::corpus::{Corpus, CorpusError, TermId};
use crate::simindex::{SimIndex, SimIndexError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("metrics undefined: empty pair set")]
    EmptyPairs,
    #[error("term {0} has no gold concept")]
    Unlabeled(TermId),
    #[error("pair ({0}, {1}) listed twice")]
    DuplicatePair(TermId, TermId),
    #[error("pair of term {0} with itself")]
    SelfPair(TermId),
    #[error("pair ({a}, {b}) labeled {given} but gold says otherwise")]
    LabelMismatch { a: TermId, b: TermId, given: bool },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Index(#[from] SimIndexError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledPair {
    pub a: TermId,
    pub b: TermId,
    pub positive: bool,
}

/// Unordered, duplicate-free labeled pairs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairSet {
    pairs: Vec<LabeledPair>,
    note: Option<String>,
}

impl PairSet {
    /// Labels each pair from the gold concepts. Both ends must be labeled.
    pub fn from_gold<I>(corpus: &Corpus, pairs: I) -> Result<Self, EvalError>
    where
        I: IntoIterator<Item = (TermId, TermId)>,
    {
        let labeled = pairs
            .into_iter()
            .map(|(a, b)| {
                corpus.term(a)?;
                corpus.term(b)?;
                let positive = corpus
                    .same_concept(a, b)
                    .ok_or(EvalError::Unlabeled(if corpus.label(a).is_none() { a } else { b }))?;
                Ok(LabeledPair { a, b, positive })
            })
            .collect::<Result<Vec<_>, EvalError>>()?;
        Self::from_labeled(labeled)
    }

    /// Canonicalizes each pair to `a < b` and rejects duplicates.
    pub fn from_labeled(pairs: Vec<LabeledPair>) -> Result<Self, EvalError> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::with_capacity(pairs.len());
        for p in pairs {
            if p.a == p.b {
                return Err(EvalError::SelfPair(p.a));
            }
            let (a, b) = (p.a.min(p.b), p.a.max(p.b));
            if !seen.insert((a, b)) {
                return Err(EvalError::DuplicatePair(a, b));
            }
            out.push(LabeledPair {
                a,
                b,
                positive: p.positive,
            });
        }
        Ok(Self {
            pairs: out,
            note: None,
        })
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = Some(note.into());
        self
    }

    pub fn note(&self) -> Option<&str> {
        self.note.as_deref()
    }

    pub fn pairs(&self) -> &[LabeledPair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.pairs.iter().filter(|p| p.positive).count()
    }

    /// Checks every label against the gold concepts of `corpus`.
    pub fn validate(&self, corpus: &Corpus) -> Result<(), EvalError> {
        for p in &self.pairs {
            corpus.term(p.a)?;
            corpus.term(p.b)?;
            let gold = corpus.same_concept(p.a, p.b);
            if gold.is_some_and(|g| g != p.positive) {
                return Err(EvalError::LabelMismatch {
                    a: p.a,
                    b: p.b,
                    given: p.positive,
                });
            }
        }
        Ok(())
    }

    /// `id_a <TAB> id_b <TAB> label`, label `positive` or `negative`.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for p in &self.pairs {
            let label = if p.positive { "positive" } else { "negative" };
            writeln!(w, "{}\t{}\t{label}", p.a, p.b)?;
        }
        w.flush()
    }

    /// Accepts `positive`/`negative` or `1`/`0` labels.
    pub fn read_tsv<R: BufRead>(r: R) -> Result<Self, EvalError> {
        let mut pairs = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let err = |m: &str| EvalError::Parse {
                line: i + 1,
                message: m.to_string(),
            };
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            if cols.len() != 3 {
                return Err(err("expected 3 tab-separated columns"));
            }
            let a = cols[0].parse().map_err(|_| err("bad id"))?;
            let b = cols[1].parse().map_err(|_| err("bad id"))?;
            let positive = match cols[2] {
                "positive" | "1" => true,
                "negative" | "0" => false,
                _ => return Err(err("label must be positive or negative")),
            };
            pairs.push(LabeledPair { a, b, positive });
        }
        Self::from_labeled(pairs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PairCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub threshold: Option<f64>,
    pub counts: PairCounts,
    /// False when nothing was predicted positive; precision is then reported as 0.
    pub precision_defined: bool,
    /// False when there are no gold positives; recall is then reported as 0.
    pub recall_defined: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub note: Option<String>,
}

impl EvalReport {
    pub fn from_counts(counts: PairCounts, threshold: Option<f64>) -> Self {
        let predicted = counts.tp + counts.fp;
        let actual = counts.tp + counts.fn_;
        let precision = if predicted > 0 {
            counts.tp as f64 / predicted as f64
        } else {
            0.0
        };
        let recall = if actual > 0 {
            counts.tp as f64 / actual as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            recall,
            precision,
            f1,
            threshold,
            counts,
            precision_defined: predicted > 0,
            recall_defined: actual > 0,
            note: None,
        }
    }
}

/// Cosine and label of every pair.
fn scored_pairs(pairs: &PairSet, corpus: &Corpus) -> Result<Vec<(f64, bool)>, EvalError> {
    if pairs.is_empty() {
        return Err(EvalError::EmptyPairs);
    }
    pairs
        .pairs()
        .iter()
        .map(|p| Ok((corpus.cosine(p.a, p.b)?, p.positive)))
        .collect()
}

fn counts_at(scored: &[(f64, bool)], threshold: f64) -> PairCounts {
    let mut c = PairCounts::default();
    for &(s, positive) in scored {
        match (s > threshold, positive) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

/// Predicts a pair positive when its cosine is strictly above `threshold`.
pub fn score_at_threshold(pairs: &PairSet, corpus: &Corpus, threshold: f64) -> Result<EvalReport, EvalError> {
    let scored = scored_pairs(pairs, corpus)?;
    let mut report = EvalReport::from_counts(counts_at(&scored, threshold), Some(threshold));
    report.note = pairs.note.clone();
    Ok(report)
}

/// Thresholds at which the prediction can change: the sentinels, every
/// distinct similarity and the midpoints between neighbors. Ascending.
fn candidate_thresholds(sorted_sims: &[f64]) -> Vec<f64> {
    let lo = sorted_sims[0];
    let hi = sorted_sims[sorted_sims.len() - 1];
    let mut out = vec![if lo > -1.0 { -1.0 } else { lo - 1.0 }];
    let mut distinct = sorted_sims.to_vec();
    distinct.dedup();
    for (i, &s) in distinct.iter().enumerate() {
        if i > 0 {
            out.push(0.5 * (distinct[i - 1] + s));
        }
        out.push(s);
    }
    out.push(if hi < 1.0 { 1.0 } else { hi });
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// Report at the threshold with the highest F1; the lowest such threshold wins ties.
pub fn best_f1_sweep(pairs: &PairSet, corpus: &Corpus) -> Result<EvalReport, EvalError> {
    let scored = scored_pairs(pairs, corpus)?;
    let mut pos: Vec<f64> = scored.iter().filter(|s| s.1).map(|s| s.0).collect();
    let mut neg: Vec<f64> = scored.iter().filter(|s| !s.1).map(|s| s.0).collect();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let mut all: Vec<f64> = scored.iter().map(|s| s.0).collect();
    all.sort_by(f64::total_cmp);

    let above = |v: &[f64], t: f64| (v.len() - v.partition_point(|&s| s <= t)) as u64;
    let mut best: Option<EvalReport> = None;
    for t in candidate_thresholds(&all) {
        let tp = above(&pos, t);
        let fp = above(&neg, t);
        let counts = PairCounts {
            tp,
            fp,
            fn_: pos.len() as u64 - tp,
            tn: neg.len() as u64 - fp,
        };
        let r = EvalReport::from_counts(counts, Some(t));
        if best.as_ref().map_or(true, |b| r.f1 > b.f1) {
            best = Some(r);
        }
    }
    let mut report = best.expect("at least one candidate threshold");
    report.note = pairs.note.clone();
    Ok(report)
}

/// One seeded-random term per concept.
pub fn choose_anchors(corpus: &Corpus, seed: u64) -> Vec<TermId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    corpus
        .concept_index()
        .values()
        .filter_map(|members| members.choose(&mut rng).copied())
        .collect()
}

pub const HARD_NEGATIVE_POSITIVES_NOTE: &str =
    "positives pair each anchor with every other term of its labeled concept";

/// Negatives are the anchor's `n_neighbors` nearest terms that carry a
/// different concept; positives pair the anchor with all of its synonyms.
pub fn build_hard_negative_set(
    corpus: &Corpus,
    index: &SimIndex,
    anchors: &[TermId],
    n_neighbors: usize,
) -> Result<PairSet, EvalError> {
    let mut seen = BTreeSet::new();
    let mut pairs = Vec::new();
    let mut push = |a: TermId, b: TermId, positive: bool| {
        let key = (a.min(b), a.max(b));
        if seen.insert(key) {
            pairs.push(LabeledPair {
                a: key.0,
                b: key.1,
                positive,
            });
        }
    };
    for &anchor in anchors {
        let record = corpus.term(anchor)?;
        let concept = record
            .concept_id
            .as_deref()
            .ok_or(EvalError::Unlabeled(anchor))?;
        let label = corpus.label(anchor);
        for id in index.top_k(anchor, n_neighbors)?.ids() {
            match corpus.label(id) {
                Some(l) if Some(l) != label => push(anchor, id, false),
                _ => {}
            }
        }
        for &syn in corpus.members_of(concept) {
            if syn != anchor {
                push(anchor, syn, true);
            }
        }
    }
    Ok(PairSet::from_labeled(pairs)?.with_note(HARD_NEGATIVE_POSITIVES_NOTE))
}

fn pairs_of(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Pair metrics of a clustering against gold concepts, from per-cluster and
/// per-concept counts. Terms not in the assignment are ignored.
pub fn score_clustering(assignment: &ClusterAssignment, corpus: &Corpus) -> Result<EvalReport, EvalError> {
    let mut cells: HashMap<(usize, u32), u64> = HashMap::new();
    let mut per_concept: HashMap<u32, u64> = HashMap::new();
    let mut n = 0u64;
    for (term, cluster) in assignment.assigned_terms() {
        corpus.term(term)?;
        let label = corpus.label(term).ok_or(EvalError::Unlabeled(term))?;
        *cells.entry((cluster, label)).or_default() += 1;
        *per_concept.entry(label).or_default() += 1;
        n += 1;
    }
    let tp: u64 = cells.values().map(|&c| pairs_of(c)).sum();
    let predicted: u64 = assignment.clusters().iter().map(|c| pairs_of(c.len() as u64)).sum();
    let actual: u64 = per_concept.values().map(|&c| pairs_of(c)).sum();
    let total = pairs_of(n);
    let counts = PairCounts {
        tp,
        fp: predicted - tp,
        fn_: actual - tp,
        tn: total - predicted - actual + tp,
    };
    Ok(EvalReport::from_counts(counts, None))
}
