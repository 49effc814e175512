//! Brute-force reference implementations shared by the integration suites.
#![allow(dead_code)]

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use termclust::corpus::{Corpus, EmbeddingMatrix};
use termclust::oracle::MockOracle;
use termclust::Oracle;

pub fn gaussian<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn unit<R: Rng>(rng: &mut R, dim: usize) -> Vec<f64> {
    let mut v = gaussian(rng, dim);
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
    v
}

/// `n` points scattered around `centers` random unit directions.
/// Returns row-major values and the center of each row.
pub fn clustered_rows<R: Rng>(rng: &mut R, n: usize, dim: usize, centers: usize, noise: f64) -> (Vec<f32>, Vec<usize>) {
    let cs: Vec<Vec<f64>> = (0..centers).map(|_| unit(rng, dim)).collect();
    let mut rows = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = rng.gen_range(0..centers);
        let g = gaussian(rng, dim);
        rows.extend(cs[c].iter().zip(&g).map(|(x, e)| (x + noise * e) as f32));
        labels.push(c);
    }
    (rows, labels)
}

pub fn corpus_from(rows: Vec<f32>, dim: usize, labels: &[Option<usize>]) -> Corpus {
    let recs = labels
        .iter()
        .enumerate()
        .map(|(i, l)| (i as u64, l.map(|c| format!("c{c}")), format!("term {i}")));
    Corpus::from_records(recs)
        .unwrap()
        .with_embeddings(EmbeddingMatrix::from_rows(dim, rows).unwrap())
        .unwrap()
}

pub fn sim(m: &EmbeddingMatrix, a: usize, b: usize) -> f64 {
    let (ra, rb) = (m.row(a), m.row(b));
    let mut s = 0.0;
    for i in 0..ra.len() {
        s += f64::from(ra[i]) * f64::from(rb[i]);
    }
    s
}

/// Every accepted term other than `q`, fully sorted by descending
/// similarity then ascending id.
pub fn ranked(m: &EmbeddingMatrix, q: usize, keep: impl Fn(usize) -> bool) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = (0..m.len())
        .filter(|&j| j != q && keep(j))
        .map(|j| (j, sim(m, q, j)))
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all
}

/// Components by breadth-first search, each sorted, ordered by smallest member.
pub fn bfs_components(edges: &[(usize, usize)], n: usize) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut comp = vec![s];
        let mut queue = VecDeque::from([s]);
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    comp.push(v);
                    queue.push_back(v);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Tiny union-find with path halving.
pub struct Dsu(Vec<usize>);

impl Dsu {
    pub fn new(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.0[x] != x {
            self.0[x] = self.0[self.0[x]];
            x = self.0[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }

    pub fn groups(&mut self) -> Vec<Vec<usize>> {
        let n = self.0.len();
        let mut by_root = std::collections::BTreeMap::<usize, Vec<usize>>::new();
        for t in 0..n {
            let r = self.find(t);
            by_root.entry(r).or_default().push(t);
        }
        let mut out: Vec<Vec<usize>> = by_root.into_values().collect();
        out.sort_by_key(|g| g[0]);
        out
    }
}

/// Components of the thresholded kNN graph from full per-query sorts.
pub fn brute_knn_components(m: &EmbeddingMatrix, k: usize, threshold: f64) -> Vec<Vec<usize>> {
    let mut dsu = Dsu::new(m.len());
    for q in 0..m.len() {
        for &(j, s) in ranked(m, q, |_| true).iter().take(k) {
            if s > threshold {
                dsu.union(q, j);
            }
        }
    }
    dsu.groups()
}

/// Pair confusion counts of a clustering by enumerating every pair.
pub fn enumerate_pairs(cluster_of: &[usize], labels: &[usize]) -> (u64, u64, u64, u64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for a in 0..labels.len() {
        for b in a + 1..labels.len() {
            match (cluster_of[a] == cluster_of[b], labels[a] == labels[b]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
    }
    (tp, fp, fn_, tn)
}

pub fn f1_from(tp: u64, fp: u64, fn_: u64) -> f64 {
    let p = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
    let r = if tp + fn_ > 0 { tp as f64 / (tp + fn_) as f64 } else { 0.0 };
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// F1 of the rule "positive when score > t".
pub fn f1_at(scored: &[(f64, bool)], t: f64) -> f64 {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for &(s, pos) in scored {
        match (s > t, pos) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    f1_from(tp, fp, fn_)
}

pub fn perfect_oracle() -> Oracle {
    Oracle::mock(MockOracle::perfect())
}
