//! Oracle-gated BIRCH tree.
//!
//! Terms are inserted one at a time. Each insertion walks down from the root,
//! always taking the child whose center (mean member embedding) is closest in
//! cosine, until it reaches a leaf. The oracle then compares the new term with
//! one seeded-random member of that leaf: on "same" the term joins the leaf,
//! otherwise it opens a new sibling leaf. Internal nodes holding more than `B`
//! children are split in two, bottom-up. Leaves are the output clusters, and a
//! tree of `n` terms has consulted the oracle exactly `n - 1` times.

use std::collections::HashSet;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, TermId};
use crate::oracle::{Oracle, OracleError, TermRef, VerdictSource};
use crate::partitioner::PartitionSet;

pub type NodeId = usize;

pub const DEFAULT_BRANCHING_FACTOR: usize = 16;

#[derive(Debug, Error)]
pub enum BirchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("term {0} already inserted")]
    DuplicateTerm(TermId),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Leaf(Vec<TermId>),
    Internal(Vec<NodeId>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BirchNode {
    pub kind: NodeKind,
    /// Componentwise sum of all descendant member embeddings.
    pub sum: Vec<f64>,
    pub count: usize,
    pub parent: Option<NodeId>,
}

impl BirchNode {
    pub fn is_leaf(&self) -> bool {
        matches!(self.kind, NodeKind::Leaf(_))
    }

    pub fn center(&self) -> Vec<f64> {
        let n = self.count.max(1) as f64;
        self.sum.iter().map(|s| s / n).collect()
    }

    fn fanout(&self) -> usize {
        match &self.kind {
            NodeKind::Leaf(_) => 0,
            NodeKind::Internal(c) => c.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub term: TermId,
    pub compared: TermId,
    pub same: bool,
    pub source: VerdictSource,
}

/// How an insertion was resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    /// First term of the tree; no oracle call.
    Root,
    Joined { leaf: NodeId },
    NewLeaf { leaf: NodeId },
}

fn cosine_to_sum(e: &[f32], sum: &[f64]) -> f64 {
    let norm = sum.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return 0.0;
    }
    e.iter().zip(sum).map(|(&a, &b)| f64::from(a) * b).sum::<f64>() / norm
}

fn unit(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / norm).collect()
    }
}

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Divides items with the given centers into two groups of sizes
/// `ceil(c/2)` and `floor(c/2)`.
///
/// The two items with the least mutual cosine seed the groups. The rest are
/// taken in decreasing order of `|cos(x, a) - cos(x, b)|` and go to the nearer
/// seed unless its group is full. Returned indices are ascending.
pub fn balanced_split(centers: &[Vec<f64>]) -> (Vec<usize>, Vec<usize>) {
    let c = centers.len();
    assert!(c >= 2, "cannot split fewer than two items");
    let units: Vec<Vec<f64>> = centers.iter().map(|v| unit(v)).collect();
    let (mut sa, mut sb, mut least) = (0, 1, f64::INFINITY);
    for i in 0..c {
        for j in i + 1..c {
            let cos = dot64(&units[i], &units[j]);
            if cos < least {
                least = cos;
                sa = i;
                sb = j;
            }
        }
    }
    let cap_a = c.div_ceil(2);
    let cap_b = c / 2;
    let mut rest: Vec<(usize, f64, f64)> = (0..c)
        .filter(|&i| i != sa && i != sb)
        .map(|i| (i, dot64(&units[i], &units[sa]), dot64(&units[i], &units[sb])))
        .collect();
    rest.sort_by(|x, y| (y.1 - y.2).abs().total_cmp(&(x.1 - x.2).abs()).then(x.0.cmp(&y.0)));
    let mut a = vec![sa];
    let mut b = vec![sb];
    for (i, ca, cb) in rest {
        let prefer_a = ca >= cb;
        if (prefer_a && a.len() < cap_a) || b.len() >= cap_b {
            a.push(i);
        } else {
            b.push(i);
        }
    }
    a.sort_unstable();
    b.sort_unstable();
    (a, b)
}

#[derive(Debug, Clone)]
pub struct BirchTree {
    nodes: Vec<BirchNode>,
    root: Option<NodeId>,
    branching_factor: usize,
    dim: usize,
    rng: ChaCha8Rng,
    query_log: Vec<QueryRecord>,
    inserted: HashSet<TermId>,
}

impl BirchTree {
    pub fn new(dim: usize, branching_factor: usize, rng_seed: u64) -> Result<Self, BirchError> {
        if branching_factor < 2 {
            return Err(BirchError::Config(format!(
                "branching factor must be at least 2, got {branching_factor}"
            )));
        }
        if dim == 0 {
            return Err(BirchError::Config("embedding dimension must be positive".into()));
        }
        Ok(Self {
            nodes: Vec::new(),
            root: None,
            branching_factor,
            dim,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            query_log: Vec::new(),
            inserted: HashSet::new(),
        })
    }

    pub fn root(&self) -> Option<NodeId> {
        self.root
    }

    pub fn node(&self, id: NodeId) -> &BirchNode {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[BirchNode] {
        &self.nodes
    }

    pub fn branching_factor(&self) -> usize {
        self.branching_factor
    }

    pub fn query_log(&self) -> &[QueryRecord] {
        &self.query_log
    }

    pub fn len(&self) -> usize {
        self.inserted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inserted.is_empty()
    }

    pub fn height(&self) -> usize {
        let mut h = 0;
        let mut cur = self.root;
        while let Some(id) = cur {
            h += 1;
            cur = match &self.nodes[id].kind {
                NodeKind::Internal(c) => c.first().copied(),
                NodeKind::Leaf(_) => None,
            };
        }
        h
    }

    fn push_node(&mut self, node: BirchNode) -> NodeId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn add_along_path(&mut self, from: NodeId, e: &[f32]) {
        let mut cur = Some(from);
        while let Some(id) = cur {
            let node = &mut self.nodes[id];
            for (s, &x) in node.sum.iter_mut().zip(e) {
                *s += f64::from(x);
            }
            node.count += 1;
            cur = node.parent;
        }
    }

    fn descend(&self, e: &[f32]) -> NodeId {
        let mut cur = self.root.expect("non-empty tree");
        while let NodeKind::Internal(children) = &self.nodes[cur].kind {
            let mut best = children[0];
            let mut best_cos = cosine_to_sum(e, &self.nodes[best].sum);
            for &c in &children[1..] {
                let cos = cosine_to_sum(e, &self.nodes[c].sum);
                if cos > best_cos || (cos == best_cos && c < best) {
                    best = c;
                    best_cos = cos;
                }
            }
            cur = best;
        }
        cur
    }

    /// Inserts `term`. If the oracle fails the tree is left exactly as it was.
    pub fn insert(&mut self, corpus: &Corpus, term: TermId, oracle: &Oracle) -> Result<InsertOutcome, BirchError> {
        let record = corpus.term(term)?;
        let e = corpus.embeddings()?.row(term);
        if e.len() != self.dim {
            return Err(BirchError::Config(format!(
                "embedding dimension {} for tree of dimension {}",
                e.len(),
                self.dim
            )));
        }
        if self.inserted.contains(&term) {
            return Err(BirchError::DuplicateTerm(term));
        }

        let Some(_) = self.root else {
            let id = self.push_node(BirchNode {
                kind: NodeKind::Leaf(vec![term]),
                sum: e.iter().map(|&x| f64::from(x)).collect(),
                count: 1,
                parent: None,
            });
            self.root = Some(id);
            self.inserted.insert(term);
            return Ok(InsertOutcome::Root);
        };

        let leaf = self.descend(e);
        let NodeKind::Leaf(members) = &self.nodes[leaf].kind else {
            unreachable!("descent ends at a leaf")
        };
        let saved_rng = self.rng.clone();
        let compared = members[self.rng.gen_range(0..members.len())];
        let verdict = match corpus
            .term(compared)
            .map_err(BirchError::from)
            .and_then(|other| Ok(oracle.judge(TermRef::from(record), TermRef::from(other))?))
        {
            Ok(v) => v,
            Err(err) => {
                self.rng = saved_rng;
                return Err(err);
            }
        };
        self.query_log.push(QueryRecord {
            term,
            compared,
            same: verdict.same,
            source: verdict.source,
        });
        self.inserted.insert(term);

        if verdict.same {
            if let NodeKind::Leaf(m) = &mut self.nodes[leaf].kind {
                m.push(term);
            }
            self.add_along_path(leaf, e);
            if let Some(parent) = self.nodes[leaf].parent {
                self.split_upward(parent);
            }
            return Ok(InsertOutcome::Joined { leaf });
        }

        let parent = match self.nodes[leaf].parent {
            Some(p) => p,
            None => {
                let old = self.nodes[leaf].clone();
                let root = self.push_node(BirchNode {
                    kind: NodeKind::Internal(vec![leaf]),
                    sum: old.sum,
                    count: old.count,
                    parent: None,
                });
                self.nodes[leaf].parent = Some(root);
                self.root = Some(root);
                root
            }
        };
        let new_leaf = self.push_node(BirchNode {
            kind: NodeKind::Leaf(vec![term]),
            sum: vec![0.0; self.dim],
            count: 0,
            parent: Some(parent),
        });
        if let NodeKind::Internal(c) = &mut self.nodes[parent].kind {
            c.push(new_leaf);
        }
        self.add_along_path(new_leaf, e);
        self.split_upward(parent);
        Ok(InsertOutcome::NewLeaf { leaf: new_leaf })
    }

    fn split_upward(&mut self, from: NodeId) {
        let mut cur = Some(from);
        while let Some(id) = cur {
            if self.nodes[id].fanout() > self.branching_factor {
                self.split_node(id).expect("overfull internal node splits");
            }
            cur = self.nodes[id].parent;
        }
    }

    /// Splits an overfull internal node in place: `node` keeps the first
    /// group and a new sibling takes the second. A split root gets a new root
    /// above it.
    pub fn split_node(&mut self, node: NodeId) -> Result<(NodeId, NodeId), BirchError> {
        let children = match &self.nodes[node].kind {
            NodeKind::Internal(c) if c.len() > self.branching_factor => c.clone(),
            NodeKind::Internal(c) => {
                return Err(BirchError::Contract(format!(
                    "node {node} has {} children, branching factor is {}",
                    c.len(),
                    self.branching_factor
                )))
            }
            NodeKind::Leaf(_) => {
                return Err(BirchError::Contract(format!("node {node} is a leaf; leaves never split")))
            }
        };
        let centers: Vec<Vec<f64>> = children.iter().map(|&c| self.nodes[c].sum.clone()).collect();
        let (ga, gb) = balanced_split(&centers);
        let group = |idx: &[usize]| -> Vec<NodeId> { idx.iter().map(|&i| children[i]).collect() };
        let (ga, gb) = (group(&ga), group(&gb));

        let totals = |ids: &[NodeId], nodes: &[BirchNode]| {
            let mut sum = vec![0.0; self.dim];
            let mut count = 0;
            for &c in ids {
                for (s, x) in sum.iter_mut().zip(&nodes[c].sum) {
                    *s += x;
                }
                count += nodes[c].count;
            }
            (sum, count)
        };
        let (sum_a, count_a) = totals(&ga, &self.nodes);
        let (sum_b, count_b) = totals(&gb, &self.nodes);
        let parent = self.nodes[node].parent;

        let sibling = self.push_node(BirchNode {
            kind: NodeKind::Internal(gb.clone()),
            sum: sum_b,
            count: count_b,
            parent,
        });
        for &c in &gb {
            self.nodes[c].parent = Some(sibling);
        }
        let n = &mut self.nodes[node];
        n.kind = NodeKind::Internal(ga);
        n.sum = sum_a;
        n.count = count_a;

        match parent {
            Some(p) => {
                if let NodeKind::Internal(c) = &mut self.nodes[p].kind {
                    let pos = c.iter().position(|&x| x == node).expect("child listed in parent");
                    c.insert(pos + 1, sibling);
                }
            }
            None => {
                let mut sum = self.nodes[node].sum.clone();
                for (s, x) in sum.iter_mut().zip(&self.nodes[sibling].sum) {
                    *s += x;
                }
                let count = self.nodes[node].count + self.nodes[sibling].count;
                let root = self.push_node(BirchNode {
                    kind: NodeKind::Internal(vec![node, sibling]),
                    sum,
                    count,
                    parent: None,
                });
                self.nodes[node].parent = Some(root);
                self.nodes[sibling].parent = Some(root);
                self.root = Some(root);
            }
        }
        Ok((node, sibling))
    }

    /// Members of every reachable leaf, each sorted, ordered by first member.
    pub fn clusters(&self) -> Vec<Vec<TermId>> {
        let mut out = Vec::new();
        let mut stack: Vec<NodeId> = self.root.into_iter().collect();
        while let Some(id) = stack.pop() {
            match &self.nodes[id].kind {
                NodeKind::Leaf(m) => {
                    let mut m = m.clone();
                    m.sort_unstable();
                    out.push(m);
                }
                NodeKind::Internal(c) => stack.extend(c.iter().rev()),
            }
        }
        out.sort_unstable_by_key(|c| c[0]);
        out
    }

    fn descendant_members(&self, id: NodeId, out: &mut Vec<TermId>) {
        match &self.nodes[id].kind {
            NodeKind::Leaf(m) => out.extend(m),
            NodeKind::Internal(c) => {
                for &ch in c {
                    self.descendant_members(ch, out);
                }
            }
        }
    }

    /// Largest absolute difference between any node's incrementally kept
    /// center and the mean recomputed from its descendant embeddings.
    pub fn audit_centers(&self, corpus: &Corpus) -> Result<f64, BirchError> {
        let m = corpus.embeddings()?;
        let mut worst = 0.0f64;
        let mut members = Vec::new();
        for (id, node) in self.nodes.iter().enumerate() {
            members.clear();
            self.descendant_members(id, &mut members);
            if members.len() != node.count {
                return Err(BirchError::Contract(format!(
                    "node {id} counts {} members but holds {}",
                    node.count,
                    members.len()
                )));
            }
            let mut mean = vec![0.0f64; self.dim];
            for &t in &members {
                for (acc, &x) in mean.iter_mut().zip(m.row(t)) {
                    *acc += f64::from(x);
                }
            }
            let n = members.len() as f64;
            for (c, acc) in node.center().iter().zip(&mean) {
                worst = worst.max((c - acc / n).abs());
            }
        }
        Ok(worst)
    }

    /// Structural invariants: parent links, fanout within `1..=B`, every
    /// inserted term in exactly one reachable leaf.
    pub fn check_structure(&self) -> Result<(), BirchError> {
        let fail = |m: String| Err(BirchError::Contract(m));
        let Some(root) = self.root else {
            return if self.inserted.is_empty() {
                Ok(())
            } else {
                fail("terms inserted but tree is empty".into())
            };
        };
        if self.nodes[root].parent.is_some() {
            return fail("root has a parent".into());
        }
        let mut seen = HashSet::new();
        let mut stack = vec![root];
        while let Some(id) = stack.pop() {
            match &self.nodes[id].kind {
                NodeKind::Leaf(m) => {
                    if m.is_empty() {
                        return fail(format!("leaf {id} is empty"));
                    }
                    for &t in m {
                        if !seen.insert(t) {
                            return fail(format!("term {t} appears in two leaves"));
                        }
                    }
                }
                NodeKind::Internal(c) => {
                    if c.is_empty() || c.len() > self.branching_factor {
                        return fail(format!("node {id} has {} children", c.len()));
                    }
                    for &ch in c {
                        if self.nodes[ch].parent != Some(id) {
                            return fail(format!("child {ch} does not point back to {id}"));
                        }
                        stack.push(ch);
                    }
                }
            }
        }
        if seen != self.inserted {
            return fail("leaf members differ from inserted terms".into());
        }
        Ok(())
    }
}

/// Clusters of one partition and the oracle resolutions spent on it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionClusters {
    pub clusters: Vec<Vec<TermId>>,
    pub queries: usize,
}

/// Builds a tree over `partition`, inserting in ascending term id order.
pub fn cluster_partition(
    partition: &[TermId],
    corpus: &Corpus,
    oracle: &Oracle,
    branching_factor: usize,
    seed: u64,
) -> Result<PartitionClusters, BirchError> {
    cluster_partition_tree(partition, corpus, oracle, branching_factor, seed)
        .map(|tree| PartitionClusters {
            clusters: tree.clusters(),
            queries: tree.query_log().len(),
        })
        .map_err(|(err, _)| err)
}

/// Like [`cluster_partition`] but returns the tree, or on failure the error
/// with the queries answered before it.
pub fn cluster_partition_tree(
    partition: &[TermId],
    corpus: &Corpus,
    oracle: &Oracle,
    branching_factor: usize,
    seed: u64,
) -> Result<BirchTree, (BirchError, Vec<QueryRecord>)> {
    if partition.is_empty() {
        return Err((BirchError::Config("empty partition".into()), Vec::new()));
    }
    let dim = corpus.embeddings().map_err(|e| (e.into(), Vec::new()))?.dim();
    let mut tree = BirchTree::new(dim, branching_factor, seed).map_err(|e| (e, Vec::new()))?;
    let mut order = partition.to_vec();
    order.sort_unstable();
    for t in order {
        if let Err(e) = tree.insert(corpus, t, oracle) {
            return Err((e, tree.query_log.clone()));
        }
    }
    Ok(tree)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub branching_factor: usize,
    pub seed: u64,
    /// Directory for per-partition checkpoint files.
    pub checkpoint_dir: Option<PathBuf>,
    /// Reuse matching checkpoints instead of recomputing.
    pub resume: bool,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            branching_factor: DEFAULT_BRANCHING_FACTOR,
            seed: 0,
            checkpoint_dir: None,
            resume: false,
        }
    }
}

/// Seed of the tree for a partition, keyed by its smallest term so it does
/// not depend on partition numbering.
pub fn partition_seed(seed: u64, first_term: TermId) -> u64 {
    seed ^ (first_term as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Final cluster per term.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    clusters: Vec<Vec<TermId>>,
    cluster_of: Vec<Option<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub terms: usize,
    pub clusters: usize,
    pub singletons: usize,
    pub max_cluster: usize,
}

impl ClusterAssignment {
    /// Canonicalizes clusters over a corpus of `n` terms: members sorted,
    /// clusters ordered by smallest member, ids dense in that order.
    pub fn from_clusters(mut clusters: Vec<Vec<TermId>>, n: usize) -> Result<Self, BirchError> {
        let mut cluster_of = vec![None; n];
        for c in clusters.iter_mut() {
            c.sort_unstable();
        }
        clusters.retain(|c| !c.is_empty());
        clusters.sort_unstable_by_key(|c| c[0]);
        for (cid, c) in clusters.iter().enumerate() {
            for &t in c {
                match cluster_of.get_mut(t) {
                    None => return Err(BirchError::Contract(format!("term {t} outside corpus of {n}"))),
                    Some(Some(_)) => return Err(BirchError::Contract(format!("term {t} in two clusters"))),
                    Some(slot) => *slot = Some(cid),
                }
            }
        }
        Ok(Self { clusters, cluster_of })
    }

    pub fn clusters(&self) -> &[Vec<TermId>] {
        &self.clusters
    }

    pub fn cluster_of(&self, term: TermId) -> Option<usize> {
        self.cluster_of.get(term).copied().flatten()
    }

    pub fn assigned_terms(&self) -> impl Iterator<Item = (TermId, usize)> + '_ {
        self.cluster_of
            .iter()
            .enumerate()
            .filter_map(|(t, c)| c.map(|c| (t, c)))
    }

    pub fn summary(&self) -> ClusterSummary {
        ClusterSummary {
            terms: self.clusters.iter().map(Vec::len).sum(),
            clusters: self.clusters.len(),
            singletons: self.clusters.iter().filter(|c| c.len() == 1).count(),
            max_cluster: self.clusters.iter().map(Vec::len).max().unwrap_or(0),
        }
    }

    /// `term_id <TAB> cluster_id` for every assigned term, ascending.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (t, c) in self.assigned_terms() {
            writeln!(w, "{t}\t{c}")?;
        }
        w.flush()
    }

    pub fn read_tsv<R: BufRead>(r: R, n: usize) -> Result<Self, BirchError> {
        let mut groups: std::collections::BTreeMap<usize, Vec<TermId>> = Default::default();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || BirchError::Checkpoint(format!("cluster file line {}: {line:?}", i + 1));
            let (t, c) = line.split_once('\t').ok_or_else(bad)?;
            let t: TermId = t.trim().parse().map_err(|_| bad())?;
            let c: usize = c.trim().parse().map_err(|_| bad())?;
            groups.entry(c).or_default().push(t);
        }
        Self::from_clusters(groups.into_values().collect(), n)
    }
}

#[derive(Debug)]
pub struct PartitionFailure {
    pub partition: usize,
    pub error: BirchError,
}

#[derive(Debug)]
pub struct ClusterRun {
    /// Clusters of every partition that completed.
    pub assignment: ClusterAssignment,
    /// Oracle resolutions spent across completed partitions, resumed ones included.
    pub queries: usize,
    pub resumed_partitions: usize,
    pub failures: Vec<PartitionFailure>,
}

#[derive(Serialize, Deserialize)]
struct PartitionCheckpoint {
    partition: usize,
    seed: u64,
    branching_factor: usize,
    terms: Vec<TermId>,
    clusters: Vec<Vec<TermId>>,
    queries: usize,
}

#[derive(Serialize)]
struct PartialCheckpoint<'a> {
    partition: usize,
    error: String,
    answered: &'a [QueryRecord],
}

fn checkpoint_path(dir: &Path, idx: usize) -> PathBuf {
    dir.join(format!("partition-{idx:06}.json"))
}

fn load_checkpoint(path: &Path, expect: &PartitionCheckpoint) -> Option<PartitionClusters> {
    let file = File::open(path).ok()?;
    let ck: PartitionCheckpoint = serde_json::from_reader(BufReader::new(file)).ok()?;
    (ck.terms == expect.terms && ck.seed == expect.seed && ck.branching_factor == expect.branching_factor)
        .then_some(PartitionClusters {
            clusters: ck.clusters,
            queries: ck.queries,
        })
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), BirchError> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        serde_json::to_writer(&mut w, value).map_err(|e| BirchError::Checkpoint(e.to_string()))?;
        w.flush()?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

/// Clusters every partition independently and in parallel. A failing
/// partition does not stop the others; it is reported in
/// [`ClusterRun::failures`].
pub fn run_clustering(
    corpus: &Corpus,
    partitions: &PartitionSet,
    oracle: &Oracle,
    config: &ClusterConfig,
) -> Result<ClusterRun, BirchError> {
    if config.branching_factor < 2 {
        return Err(BirchError::Config("branching factor must be at least 2".into()));
    }
    if partitions.term_count() != corpus.len() {
        return Err(BirchError::Config(format!(
            "partitions cover {} terms, corpus has {}",
            partitions.term_count(),
            corpus.len()
        )));
    }
    corpus.embeddings()?;
    if let Some(dir) = &config.checkpoint_dir {
        fs::create_dir_all(dir)?;
    }

    let results: Vec<(Result<PartitionClusters, BirchError>, bool)> = partitions
        .partitions()
        .par_iter()
        .enumerate()
        .map(|(idx, terms)| {
            let seed = partition_seed(config.seed, terms[0]);
            let expect = PartitionCheckpoint {
                partition: idx,
                seed,
                branching_factor: config.branching_factor,
                terms: terms.clone(),
                clusters: Vec::new(),
                queries: 0,
            };
            let path = config.checkpoint_dir.as_deref().map(|d| checkpoint_path(d, idx));
            if config.resume {
                if let Some(done) = path.as_deref().and_then(|p| load_checkpoint(p, &expect)) {
                    return (Ok(done), true);
                }
            }
            match cluster_partition_tree(terms, corpus, oracle, config.branching_factor, seed) {
                Ok(tree) => {
                    let done = PartitionClusters {
                        clusters: tree.clusters(),
                        queries: tree.query_log().len(),
                    };
                    if let Some(p) = &path {
                        let ck = PartitionCheckpoint {
                            clusters: done.clusters.clone(),
                            queries: done.queries,
                            ..expect
                        };
                        if let Err(e) = write_json_atomic(p, &ck) {
                            return (Err(e), false);
                        }
                    }
                    (Ok(done), false)
                }
                Err((error, answered)) => {
                    if let Some(p) = &path {
                        let partial = PartialCheckpoint {
                            partition: idx,
                            error: error.to_string(),
                            answered: &answered,
                        };
                        if let Err(e) = write_json_atomic(&p.with_extension("partial.json"), &partial) {
                            log::warn!("could not record partial run of partition {idx}: {e}");
                        }
                    }
                    (Err(error), false)
                }
            }
        })
        .collect();

    let mut clusters = Vec::new();
    let mut queries = 0;
    let mut resumed_partitions = 0;
    let mut failures = Vec::new();
    for (idx, (res, resumed)) in results.into_iter().enumerate() {
        match res {
            Ok(done) => {
                queries += done.queries;
                resumed_partitions += usize::from(resumed);
                clusters.extend(done.clusters);
            }
            Err(error) => failures.push(PartitionFailure { partition: idx, error }),
        }
    }
    Ok(ClusterRun {
        assignment: ClusterAssignment::from_clusters(clusters, corpus.len())?,
        queries,
        resumed_partitions,
        failures,
    })
}
