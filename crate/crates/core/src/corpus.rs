//! Term records, gold concept labels and the unit-normalized embedding matrix.
//!
//! Every similarity in the crate is a cosine between two rows of an
//! [`EmbeddingMatrix`]. Rows are normalized once when they enter the matrix,
//! so a cosine is a plain dot product from then on.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Dense handle of a term inside a [`Corpus`], in `[0, len)`.
pub type TermId = usize;

/// Magic bytes opening the canonical binary embedding file.
pub const EMBEDDING_MAGIC: &[u8; 8] = b"SYNFEMB1";

/// Rows whose norm is already this close to 1 are left untouched, which makes
/// normalization idempotent bit for bit.
const UNIT_SLACK: f64 = 4.0 * f32::EPSILON as f64;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate term id {id}")]
    DuplicateTermId { id: u64, line: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("embedding row {row} has zero or non-finite norm")]
    DegenerateVector { row: usize },
    #[error("term id {id} out of range for corpus of {len} terms")]
    InvalidId { id: TermId, len: usize },
    #[error("corpus has no embeddings attached")]
    MissingEmbeddings,
    #[error("malformed embedding file: {0}")]
    Format(String),
}

/// One surface string, optionally labeled with its gold concept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermRecord {
    /// Dense id assigned in input order.
    pub term_id: TermId,
    /// Identifier from the first column of the term file.
    pub source_id: u64,
    pub text: String,
    pub concept_id: Option<String>,
}

/// Row-major matrix of unit-norm `f32` vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
}

/// Scales `row` to unit L2 norm. Returns `false` for zero or non-finite rows.
pub fn normalize_row(row: &mut [f32]) -> bool {
    let norm = row
        .iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() || norm == 0.0 {
        return false;
    }
    if (norm - 1.0).abs() > UNIT_SLACK {
        for x in row.iter_mut() {
            *x = (f64::from(*x) / norm) as f32;
        }
    }
    true
}

/// Dot product accumulated in `f64`.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

impl EmbeddingMatrix {
    /// Builds a matrix from `count * dim` row-major values, normalizing every row.
    pub fn from_rows(dim: usize, mut data: Vec<f32>) -> Result<Self, CorpusError> {
        if dim == 0 {
            return Err(CorpusError::Shape("embedding dimension must be positive".into()));
        }
        if data.len() % dim != 0 {
            return Err(CorpusError::Shape(format!(
                "{} values do not form rows of dimension {dim}",
                data.len()
            )));
        }
        for (row, chunk) in data.chunks_exact_mut(dim).enumerate() {
            if !normalize_row(chunk) {
                return Err(CorpusError::DegenerateVector { row });
            }
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn dot(&self, a: usize, b: usize) -> f64 {
        dot(self.row(a), self.row(b))
    }

    /// Overwrites row `i` with `values` projected back onto the unit sphere.
    pub fn set_row(&mut self, i: usize, values: &[f64]) -> Result<(), CorpusError> {
        if values.len() != self.dim {
            return Err(CorpusError::Shape(format!(
                "row of length {} for dimension {}",
                values.len(),
                self.dim
            )));
        }
        let mut row: Vec<f32> = values.iter().map(|&v| v as f32).collect();
        if !normalize_row(&mut row) {
            return Err(CorpusError::DegenerateVector { row: i });
        }
        self.data[i * self.dim..(i + 1) * self.dim].copy_from_slice(&row);
        Ok(())
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<(), CorpusError> {
        w.write_all(EMBEDDING_MAGIC)?;
        let dim = u32::try_from(self.dim)
            .map_err(|_| CorpusError::Shape("dimension exceeds u32".into()))?;
        w.write_all(&dim.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        for &x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_binary_file(&self, path: &Path) -> Result<(), CorpusError> {
        self.write_binary(BufWriter::new(File::create(path)?))
    }

    /// Reads the canonical binary format, magic included.
    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, CorpusError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != EMBEDDING_MAGIC {
            return Err(CorpusError::Format("bad magic".into()));
        }
        Self::read_binary_body(r)
    }

    fn read_binary_body<R: Read>(mut r: R) -> Result<Self, CorpusError> {
        let mut b4 = [0u8; 4];
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b4)?;
        let dim = u32::from_le_bytes(b4) as usize;
        r.read_exact(&mut b8)?;
        let count = usize::try_from(u64::from_le_bytes(b8))
            .map_err(|_| CorpusError::Format("row count exceeds usize".into()))?;
        if dim == 0 {
            return Err(CorpusError::Shape("embedding dimension must be positive".into()));
        }
        let total = count
            .checked_mul(dim)
            .ok_or_else(|| CorpusError::Format("row count overflow".into()))?;
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() != total * 4 {
            return Err(CorpusError::Format(format!(
                "expected {} payload bytes for {count}x{dim}, found {}",
                total * 4,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::from_rows(dim, data)
    }

    /// Reads `{"term_id": n, "vec": [...]}` lines; every id in `[0, count)` must
    /// appear exactly once.
    pub fn read_jsonl<R: BufRead>(r: R, count: usize) -> Result<Self, CorpusError> {
        #[derive(Deserialize)]
        struct Line {
            term_id: usize,
            vec: Vec<f32>,
        }
        let mut rows: Vec<Option<Vec<f32>>> = vec![None; count];
        let mut dim = None;
        for (idx, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: Line = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
            let d = *dim.get_or_insert(parsed.vec.len());
            if parsed.vec.len() != d {
                return Err(CorpusError::Shape(format!(
                    "line {}: vector of length {} after dimension {d}",
                    idx + 1,
                    parsed.vec.len()
                )));
            }
            let slot = rows.get_mut(parsed.term_id).ok_or_else(|| {
                CorpusError::Shape(format!(
                    "line {}: term id {} outside corpus of {count}",
                    idx + 1,
                    parsed.term_id
                ))
            })?;
            if slot.is_some() {
                return Err(CorpusError::Shape(format!(
                    "line {}: term id {} given twice",
                    idx + 1,
                    parsed.term_id
                )));
            }
            *slot = Some(parsed.vec);
        }
        let dim = match dim {
            Some(d) => d,
            None if count == 0 => {
                return Err(CorpusError::Shape("no embedding rows to infer dimension".into()))
            }
            None => return Err(CorpusError::Shape(format!("0 rows for {count} terms"))),
        };
        let mut data = Vec::with_capacity(count * dim);
        for (i, row) in rows.into_iter().enumerate() {
            let row = row.ok_or_else(|| CorpusError::Shape(format!("missing row for term {i}")))?;
            data.extend(row);
        }
        Self::from_rows(dim, data)
    }

    /// Opens either embedding format, sniffing the binary magic.
    pub fn read_file(path: &Path, count: usize) -> Result<Self, CorpusError> {
        let mut reader = BufReader::new(File::open(path)?);
        let head = reader.fill_buf()?;
        if head.len() >= EMBEDDING_MAGIC.len() && &head[..EMBEDDING_MAGIC.len()] == EMBEDDING_MAGIC {
            reader.consume(EMBEDDING_MAGIC.len());
            Self::read_binary_body(reader)
        } else {
            Self::read_jsonl(reader, count)
        }
    }
}

/// Controls the optional word-count filter applied during ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestOptions {
    pub filter_long_terms: bool,
    pub max_words: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            filter_long_terms: false,
            max_words: 5,
        }
    }
}

/// Terms, their concept index and (once attached) their embeddings.
#[derive(Debug, Clone)]
pub struct Corpus {
    terms: Vec<TermRecord>,
    embeddings: Option<EmbeddingMatrix>,
    concept_index: BTreeMap<String, Vec<TermId>>,
    labels: Vec<Option<u32>>,
}

impl Corpus {
    /// Builds a corpus from `(source_id, concept_id, text)` triples. Text is
    /// trimmed and lowercased; ids become dense in input order.
    pub fn from_records<I>(records: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = (u64, Option<String>, String)>,
    {
        let mut seen = HashSet::new();
        let mut terms = Vec::new();
        for (pos, (source_id, concept_id, text)) in records.into_iter().enumerate() {
            if !seen.insert(source_id) {
                return Err(CorpusError::DuplicateTermId {
                    id: source_id,
                    line: pos + 1,
                });
            }
            let text = text.trim().to_lowercase();
            if text.is_empty() {
                return Err(CorpusError::Parse {
                    line: pos + 1,
                    message: "empty term text".into(),
                });
            }
            terms.push(TermRecord {
                term_id: terms.len(),
                source_id,
                text,
                concept_id,
            });
        }
        Ok(Self::index(terms))
    }

    fn index(terms: Vec<TermRecord>) -> Self {
        let mut concept_index: BTreeMap<String, Vec<TermId>> = BTreeMap::new();
        for t in &terms {
            if let Some(c) = &t.concept_id {
                concept_index.entry(c.clone()).or_default().push(t.term_id);
            }
        }
        let mut labels = vec![None; terms.len()];
        for (label, members) in concept_index.values().enumerate() {
            for &m in members {
                labels[m] = Some(label as u32);
            }
        }
        Self {
            terms,
            embeddings: None,
            concept_index,
            labels,
        }
    }

    /// Parses the tab-separated term file `term_id <TAB> concept_id <TAB> text`.
    pub fn read_terms<R: BufRead>(r: R, opts: IngestOptions) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        let mut terms = Vec::new();
        for (idx, line) in r.lines().enumerate() {
            let lineno = idx + 1;
            let line = line?;
            let line = line.strip_prefix('\u{feff}').unwrap_or(&line);
            if line.trim().is_empty() {
                continue;
            }
            let mut cols = line.splitn(3, '\t');
            let (Some(id), Some(concept), Some(text)) = (cols.next(), cols.next(), cols.next())
            else {
                return Err(CorpusError::Parse {
                    line: lineno,
                    message: "expected 3 tab-separated columns".into(),
                });
            };
            let source_id: u64 = id.trim().parse().map_err(|_| CorpusError::Parse {
                line: lineno,
                message: format!("invalid term id {id:?}"),
            })?;
            if !seen.insert(source_id) {
                return Err(CorpusError::DuplicateTermId {
                    id: source_id,
                    line: lineno,
                });
            }
            let concept = concept.trim();
            let concept_id = match concept {
                "" => {
                    return Err(CorpusError::Parse {
                        line: lineno,
                        message: "empty concept column (use '-' for unlabeled)".into(),
                    })
                }
                "-" => None,
                c => Some(c.to_string()),
            };
            let text = text.trim().to_lowercase();
            if text.is_empty() {
                return Err(CorpusError::Parse {
                    line: lineno,
                    message: "empty term text".into(),
                });
            }
            if opts.filter_long_terms && text.split_whitespace().count() > opts.max_words {
                continue;
            }
            terms.push(TermRecord {
                term_id: terms.len(),
                source_id,
                text,
                concept_id,
            });
        }
        Ok(Self::index(terms))
    }

    pub fn ingest_terms(path: &Path, opts: IngestOptions) -> Result<Self, CorpusError> {
        Self::read_terms(BufReader::new(File::open(path)?), opts)
    }

    /// Writes the term file using each record's source id.
    pub fn write_terms<W: Write>(&self, mut w: W) -> Result<(), CorpusError> {
        for t in &self.terms {
            writeln!(
                w,
                "{}\t{}\t{}",
                t.source_id,
                t.concept_id.as_deref().unwrap_or("-"),
                t.text
            )?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_terms_file(&self, path: &Path) -> Result<(), CorpusError> {
        self.write_terms(BufWriter::new(File::create(path)?))
    }

    pub fn with_embeddings(mut self, embeddings: EmbeddingMatrix) -> Result<Self, CorpusError> {
        if embeddings.len() != self.terms.len() {
            return Err(CorpusError::Shape(format!(
                "{} embedding rows for {} terms",
                embeddings.len(),
                self.terms.len()
            )));
        }
        self.embeddings = Some(embeddings);
        Ok(self)
    }

    /// Loads and normalizes embeddings from either supported file format.
    pub fn attach_embeddings(self, path: &Path) -> Result<Self, CorpusError> {
        let m = EmbeddingMatrix::read_file(path, self.len())?;
        self.with_embeddings(m)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[TermRecord] {
        &self.terms
    }

    pub fn term(&self, id: TermId) -> Result<&TermRecord, CorpusError> {
        self.terms.get(id).ok_or(CorpusError::InvalidId {
            id,
            len: self.terms.len(),
        })
    }

    pub fn concept_index(&self) -> &BTreeMap<String, Vec<TermId>> {
        &self.concept_index
    }

    /// Dense integer label of the term's concept, in concept-id order.
    #[inline]
    pub fn label(&self, id: TermId) -> Option<u32> {
        self.labels.get(id).copied().flatten()
    }

    pub fn labels(&self) -> &[Option<u32>] {
        &self.labels
    }

    /// `None` when either term is unlabeled.
    pub fn same_concept(&self, a: TermId, b: TermId) -> Option<bool> {
        Some(self.label(a)? == self.label(b)?)
    }

    pub fn members_of(&self, concept: &str) -> &[TermId] {
        self.concept_index.get(concept).map_or(&[], Vec::as_slice)
    }

    pub fn embeddings(&self) -> Result<&EmbeddingMatrix, CorpusError> {
        self.embeddings.as_ref().ok_or(CorpusError::MissingEmbeddings)
    }

    pub fn has_embeddings(&self) -> bool {
        self.embeddings.is_some()
    }

    pub fn into_embeddings(self) -> Option<EmbeddingMatrix> {
        self.embeddings
    }

    pub fn cosine(&self, a: TermId, b: TermId) -> Result<f64, CorpusError> {
        let m = self.embeddings()?;
        for id in [a, b] {
            if id >= self.terms.len() {
                return Err(CorpusError::InvalidId {
                    id,
                    len: self.terms.len(),
                });
            }
        }
        Ok(m.dot(a, b))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn read(s: &str, opts: IngestOptions) -> Result<Corpus, CorpusError> {
        Corpus::read_terms(Cursor::new(s), opts)
    }

    #[test]
    fn ingest_builds_concept_index() {
        let c = read("0\tC1\tAspirin\n1\tC1\tacetylsalicylic acid\n", IngestOptions::default())
            .unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.terms()[0].text, "aspirin");
        assert_eq!(c.concept_index().get("C1").unwrap(), &vec![0, 1]);
    }

    #[test]
    fn empty_file_gives_empty_corpus() {
        let c = read("", IngestOptions::default()).unwrap();
        assert!(c.is_empty());
        assert!(c.concept_index().is_empty());
    }

    #[test]
    fn long_terms_dropped_only_when_filter_on() {
        let src = "0\tC1\tone two three four five six\n1\tC2\tshort term\n";
        let on = IngestOptions {
            filter_long_terms: true,
            max_words: 5,
        };
        assert_eq!(read(src, on).unwrap().len(), 1);
        assert_eq!(read(src, IngestOptions::default()).unwrap().len(), 2);
        let kept = read(src, on).unwrap();
        assert_eq!(kept.terms()[0].term_id, 0);
        assert_eq!(kept.terms()[0].source_id, 1);
    }

    #[test]
    fn unlabeled_dash() {
        let c = read("7\t-\tfoo\n", IngestOptions::default()).unwrap();
        assert_eq!(c.terms()[0].concept_id, None);
        assert_eq!(c.label(0), None);
    }

    #[test]
    fn malformed_row_names_line() {
        let err = read("0\tC1\tok\nbad row\n", IngestOptions::default()).unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 2, .. }), "{err}");
        let err = read("x\tC1\tok\n", IngestOptions::default()).unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 1, .. }));
    }

    #[test]
    fn duplicate_id_is_integrity_error() {
        let err = read("3\tC1\ta\n3\tC2\tb\n", IngestOptions::default()).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateTermId { id: 3, line: 2 }));
    }

    #[test]
    fn blank_text_rejected() {
        let err = read("0\tC1\t   \n", IngestOptions::default()).unwrap_err();
        assert!(matches!(err, CorpusError::Parse { line: 1, .. }));
    }

    #[test]
    fn three_four_five() {
        let m = EmbeddingMatrix::from_rows(2, vec![3.0, 4.0]).unwrap();
        assert_eq!(m.row(0), &[0.6f32, 0.8f32]);
    }

    #[test]
    fn rows_are_unit_norm() {
        let m = EmbeddingMatrix::from_rows(4, vec![1.0, 2.0, 3.0, 4.0, -0.5, 0.1, 9.0, 0.0]).unwrap();
        assert_eq!(m.dim(), 4);
        for i in 0..m.len() {
            assert!((m.dot(i, i).sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_row_rejected() {
        let err = EmbeddingMatrix::from_rows(2, vec![1.0, 0.0, 0.0, 0.0]).unwrap_err();
        assert!(matches!(err, CorpusError::DegenerateVector { row: 1 }));
    }

    #[test]
    fn count_mismatch_is_shape_error() {
        let c = read("0\tA\ta\n1\tA\tb\n2\tB\tc\n", IngestOptions::default()).unwrap();
        let m = EmbeddingMatrix::from_rows(2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(c.with_embeddings(m), Err(CorpusError::Shape(_))));
    }

    #[test]
    fn cosine_cases() {
        let s = std::f32::consts::FRAC_1_SQRT_2;
        let c = read("0\tA\ta\n1\tA\tb\n2\tB\tc\n3\tB\td\n", IngestOptions::default())
            .unwrap()
            .with_embeddings(
                EmbeddingMatrix::from_rows(2, vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, s, s]).unwrap(),
            )
            .unwrap();
        assert!((c.cosine(0, 1).unwrap() - 1.0).abs() < 1e-6);
        assert!(c.cosine(0, 2).unwrap().abs() < 1e-12);
        assert!((c.cosine(0, 3).unwrap() - 0.707_106_78).abs() < 1e-6);
        assert_eq!(c.cosine(3, 0).unwrap(), c.cosine(0, 3).unwrap());
        assert!(matches!(c.cosine(0, 9), Err(CorpusError::InvalidId { id: 9, .. })));
    }

    #[test]
    fn cosine_without_embeddings() {
        let c = read("0\tA\ta\n", IngestOptions::default()).unwrap();
        assert!(matches!(c.cosine(0, 0), Err(CorpusError::MissingEmbeddings)));
    }

    #[test]
    fn binary_layout() {
        let m = EmbeddingMatrix::from_rows(2, vec![0.6, 0.8]).unwrap();
        let mut buf = Vec::new();
        m.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"SYNFEMB1");
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..20], &1u64.to_le_bytes());
        assert_eq!(&buf[20..24], &0.6f32.to_le_bytes());
        assert_eq!(buf.len(), 28);
        let back = EmbeddingMatrix::read_binary(Cursor::new(&buf)).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncated_binary_rejected() {
        let m = EmbeddingMatrix::from_rows(2, vec![0.6, 0.8]).unwrap();
        let mut buf = Vec::new();
        m.write_binary(&mut buf).unwrap();
        buf.pop();
        assert!(matches!(
            EmbeddingMatrix::read_binary(Cursor::new(&buf)),
            Err(CorpusError::Format(_))
        ));
    }

    #[test]
    fn jsonl_rows_by_term_id() {
        let src = "{\"term_id\": 1, \"vec\": [0, 2]}\n{\"term_id\": 0, \"vec\": [3, 4]}\n";
        let m = EmbeddingMatrix::read_jsonl(Cursor::new(src), 2).unwrap();
        assert_eq!(m.row(0), &[0.6, 0.8]);
        assert_eq!(m.row(1), &[0.0, 1.0]);
        assert!(EmbeddingMatrix::read_jsonl(Cursor::new(src), 3).is_err());
    }

    #[test]
    fn set_row_projects() {
        let mut m = EmbeddingMatrix::from_rows(2, vec![1.0, 0.0]).unwrap();
        m.set_row(0, &[0.0, 5.0]).unwrap();
        assert_eq!(m.row(0), &[0.0, 1.0]);
        assert!(m.set_row(0, &[0.0, 0.0]).is_err());
    }
}
