//! Synonym clustering from term embeddings.
//!
//! The crate groups terms into concepts in four stages: embeddings are
//! (optionally) refined with a Multi-Similarity contrastive loss and iterative
//! hard-negative mining ([`contrastive`]); a thresholded kNN graph splits the
//! corpus into independent partitions ([`partitioner`]); each partition is
//! clustered by a BIRCH tree whose leaf membership is decided by a pairwise
//! equivalence oracle ([`birch`], [`oracle`]); and results are scored with
//! pairwise precision, recall and F1 ([`eval`]).

pub mod birch;
pub mod contrastive;
pub mod corpus;
pub mod eval;
pub mod oracle;
pub mod partitioner;
pub mod pipeline;
pub mod simindex;
pub mod synth;

pub use corpus::{Corpus, EmbeddingMatrix, IngestOptions, TermId, TermRecord};
pub use oracle::{Oracle, OracleVerdict, VerdictSource};
pub use simindex::{NeighborList, SimIndex};
