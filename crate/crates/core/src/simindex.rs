//! Exact top-k cosine search over a snapshot of the corpus embeddings.

use std::cmp::Ordering;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, EmbeddingMatrix, TermId};

#[derive(Debug, Error)]
pub enum SimIndexError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("query id {id} out of range for index of {len} terms")]
    InvalidQuery { id: TermId, len: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed neighbor list: {0}")]
    Format(#[from] serde_json::Error),
}

/// Neighbors of one query, most similar first, the query itself excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborList {
    #[serde(rename = "q")]
    pub query: TermId,
    #[serde(rename = "nn")]
    pub neighbors: Vec<(TermId, f64)>,
}

impl NeighborList {
    pub fn ids(&self) -> impl Iterator<Item = TermId> + '_ {
        self.neighbors.iter().map(|&(id, _)| id)
    }
}

/// Descending similarity, then ascending id. `-0.0` and `0.0` tie.
#[inline]
pub fn rank_order(a: &(TermId, f64), b: &(TermId, f64)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or_else(|| b.1.total_cmp(&a.1))
        .then(a.0.cmp(&b.0))
}

/// Keeps the `k` best candidates under [`rank_order`], sorted.
fn select_top(mut cands: Vec<(TermId, f64)>, k: usize) -> Vec<(TermId, f64)> {
    if k == 0 {
        return Vec::new();
    }
    if cands.len() > k {
        cands.select_nth_unstable_by(k - 1, rank_order);
        cands.truncate(k);
    }
    cands.sort_unstable_by(rank_order);
    cands
}

/// Brute-force similarity index. It owns a copy of the embeddings taken at
/// build time, so later edits to the corpus are invisible until a rebuild.
#[derive(Debug, Clone)]
pub struct SimIndex {
    matrix: EmbeddingMatrix,
}

impl SimIndex {
    pub fn build(corpus: &Corpus) -> Result<Self, SimIndexError> {
        Ok(Self::from_matrix(corpus.embeddings()?.clone()))
    }

    pub fn from_matrix(matrix: EmbeddingMatrix) -> Self {
        Self { matrix }
    }

    pub fn len(&self) -> usize {
        self.matrix.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.is_empty()
    }

    pub fn matrix(&self) -> &EmbeddingMatrix {
        &self.matrix
    }

    fn check(&self, query: TermId) -> Result<(), SimIndexError> {
        if query >= self.len() {
            return Err(SimIndexError::InvalidQuery {
                id: query,
                len: self.len(),
            });
        }
        Ok(())
    }

    pub fn similarity(&self, a: TermId, b: TermId) -> Result<f64, SimIndexError> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.matrix.dot(a, b))
    }

    /// The `min(k, N-1)` nearest terms to `query`. Ties go to the lower id.
    pub fn top_k(&self, query: TermId, k: usize) -> Result<NeighborList, SimIndexError> {
        self.top_k_filtered(query, k, |_| true)
    }

    /// Like [`top_k`](Self::top_k) but only over ids accepted by `keep`.
    pub fn top_k_filtered<F>(
        &self,
        query: TermId,
        k: usize,
        keep: F,
    ) -> Result<NeighborList, SimIndexError>
    where
        F: Fn(TermId) -> bool,
    {
        self.check(query)?;
        if k == 0 {
            return Ok(NeighborList {
                query,
                neighbors: Vec::new(),
            });
        }
        let q = self.matrix.row(query);
        let cands: Vec<(TermId, f64)> = self
            .matrix
            .rows()
            .enumerate()
            .filter(|&(id, _)| id != query && keep(id))
            .map(|(id, row)| (id, crate::corpus::dot(q, row)))
            .collect();
        Ok(NeighborList {
            query,
            neighbors: select_top(cands, k),
        })
    }

    /// Neighbor lists for every term, computed in parallel.
    pub fn all_top_k(&self, k: usize) -> Vec<NeighborList> {
        (0..self.len())
            .into_par_iter()
            .map(|q| self.top_k(q, k).expect("query in range"))
            .collect()
    }
}

pub fn write_neighbor_lists<W: Write>(mut w: W, lists: &[NeighborList]) -> Result<(), SimIndexError> {
    for l in lists {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_neighbor_lists<R: BufRead>(r: R) -> Result<Vec<NeighborList>, SimIndexError> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
