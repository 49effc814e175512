//! Splits the corpus into independent work units: connected components of the
//! graph linking each term to those of its top-k neighbors above a similarity
//! threshold.

use std::io::{BufRead, Write};

use petgraph::unionfind::UnionFind;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TermId;
use crate::simindex::SimIndex;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("edge endpoint {id} out of range for {n} terms")]
    InvalidId { id: TermId, n: usize },
    #[error("invalid partition parameters: {0}")]
    Config(String),
    #[error("inconsistent partition set: {0}")]
    Inconsistent(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed partition file: {0}")]
    Format(#[from] serde_json::Error),
}

/// Disjoint term groups covering `0..n`. Each group is sorted and groups are
/// ordered by their smallest member.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionSet {
    partitions: Vec<Vec<TermId>>,
    partition_of: Vec<usize>,
}

impl PartitionSet {
    /// Validates and canonicalizes an explicit grouping of `0..n`.
    pub fn from_partitions(mut parts: Vec<Vec<TermId>>, n: usize) -> Result<Self, PartitionError> {
        let mut partition_of = vec![usize::MAX; n];
        for p in parts.iter_mut() {
            if p.is_empty() {
                return Err(PartitionError::Inconsistent("empty partition".into()));
            }
            p.sort_unstable();
        }
        parts.sort_unstable_by_key(|p| p[0]);
        for (idx, p) in parts.iter().enumerate() {
            for &t in p {
                let slot = partition_of
                    .get_mut(t)
                    .ok_or(PartitionError::InvalidId { id: t, n })?;
                if *slot != usize::MAX {
                    return Err(PartitionError::Inconsistent(format!("term {t} in two partitions")));
                }
                *slot = idx;
            }
        }
        if let Some(t) = partition_of.iter().position(|&p| p == usize::MAX) {
            return Err(PartitionError::Inconsistent(format!("term {t} not covered")));
        }
        Ok(Self {
            partitions: parts,
            partition_of,
        })
    }

    pub fn partitions(&self) -> &[Vec<TermId>] {
        &self.partitions
    }

    pub fn partition_of(&self, term: TermId) -> Option<usize> {
        self.partition_of.get(term).copied()
    }

    pub fn len(&self) -> usize {
        self.partitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.partitions.is_empty()
    }

    pub fn term_count(&self) -> usize {
        self.partition_of.len()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), PartitionError> {
        for (idx, terms) in self.partitions.iter().enumerate() {
            serde_json::to_writer(
                &mut w,
                &PartitionLine {
                    partition: idx,
                    terms: terms.clone(),
                },
            )?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R, n: usize) -> Result<Self, PartitionError> {
        let mut parts = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: PartitionLine = serde_json::from_str(&line)?;
            parts.push(parsed.terms);
        }
        Self::from_partitions(parts, n)
    }
}

#[derive(Serialize, Deserialize)]
struct PartitionLine {
    partition: usize,
    terms: Vec<TermId>,
}

/// Connected components of an undirected graph on `0..n`.
pub fn components(edges: &[(TermId, TermId)], n: usize) -> Result<PartitionSet, PartitionError> {
    let mut uf = UnionFind::<usize>::new(n);
    for &(a, b) in edges {
        for id in [a, b] {
            if id >= n {
                return Err(PartitionError::InvalidId { id, n });
            }
        }
        uf.union(a, b);
    }
    let mut root_slot = vec![usize::MAX; n];
    let mut partitions: Vec<Vec<TermId>> = Vec::new();
    let mut partition_of = vec![0; n];
    for t in 0..n {
        let root = uf.find_mut(t);
        if root_slot[root] == usize::MAX {
            root_slot[root] = partitions.len();
            partitions.push(Vec::new());
        }
        let p = root_slot[root];
        partitions[p].push(t);
        partition_of[t] = p;
    }
    Ok(PartitionSet {
        partitions,
        partition_of,
    })
}

/// Directed kNN edges whose similarity is strictly above `threshold`,
/// returned as sorted, deduplicated undirected pairs `(min, max)`.
pub fn knn_edges(index: &SimIndex, k: usize, threshold: f64) -> Vec<(TermId, TermId)> {
    let mut edges: Vec<(TermId, TermId)> = index
        .all_top_k(k)
        .into_par_iter()
        .flat_map_iter(|list| {
            let q = list.query;
            list.neighbors
                .into_iter()
                .filter(move |&(_, s)| s > threshold)
                .map(move |(j, _)| (q.min(j), q.max(j)))
        })
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

pub fn build_partition(index: &SimIndex, k: usize, threshold: f64) -> Result<PartitionSet, PartitionError> {
    if k == 0 {
        return Err(PartitionError::Config("k must be at least 1".into()));
    }
    if !(-1.0..=1.0).contains(&threshold) {
        return Err(PartitionError::Config(format!("threshold {threshold} outside [-1, 1]")));
    }
    let edges = knn_edges(index, k, threshold);
    components(&edges, index.len())
}
