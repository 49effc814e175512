//! Stage orchestration behind the command-line tool.
//!
//! Every stage reads its inputs from the output directory of earlier stages,
//! writes into its own subdirectory and finishes with a `manifest.json`
//! recording the effective configuration, its hash, seeds, input and output
//! digests and (for clustering) the oracle budget consumed.
//!
//! ```text
//! <output_dir>/ingest/     terms.tsv embeddings.bin
//! <output_dir>/optimize/   embeddings.bin loss.csv
//! <output_dir>/partition/  partitions.jsonl
//! <output_dir>/cluster/    clusters.tsv summary.json checkpoints/
//! <output_dir>/eval/       pairs.tsv report.json
//! ```

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::birch::{run_clustering, BirchError, ClusterConfig, ClusterSummary, DEFAULT_BRANCHING_FACTOR};
use crate::contrastive::{optimize_embeddings, write_loss_trace, ContrastiveError, LossConfig, OptimizerConfig};
use crate::corpus::{Corpus, CorpusError, EmbeddingMatrix, IngestOptions};
use crate::eval::{best_f1_sweep, build_hard_negative_set, choose_anchors, score_clustering, EvalError, EvalReport, PairSet};
use crate::oracle::{
    ChatTransport, EquivalenceBackend, FixtureTransport, HeuristicOracle, HttpTransport, MockOracle, Oracle,
    OracleBudget, OracleError, RateLimiter, RemoteOracle,
};
use crate::partitioner::{build_partition, PartitionError, PartitionSet};
use crate::simindex::{SimIndex, SimIndexError};
use crate::synth::{self, SynthConfig, SynthError};

pub const MANIFEST: &str = "manifest.json";

/// Failure classes, each with its own process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    Config,
    Data,
    Oracle,
    Budget,
}

impl FailureKind {
    pub fn exit_code(self) -> i32 {
        match self {
            FailureKind::Config => 2,
            FailureKind::Data => 3,
            FailureKind::Oracle => 4,
            FailureKind::Budget => 5,
        }
    }
}

#[derive(Debug, Error)]
#[error("{stage}: {message}")]
pub struct PipelineError {
    pub stage: &'static str,
    pub kind: FailureKind,
    pub message: String,
}

impl PipelineError {
    fn new(stage: &'static str, kind: FailureKind, message: impl Into<String>) -> Self {
        Self {
            stage,
            kind,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

/// Maps module errors onto a failure class.
trait Classify: std::fmt::Display {
    fn kind(&self) -> FailureKind;

    fn at(self, stage: &'static str) -> PipelineError
    where
        Self: Sized,
    {
        PipelineError::new(stage, self.kind(), self.to_string())
    }
}

impl Classify for CorpusError {
    fn kind(&self) -> FailureKind {
        FailureKind::Data
    }
}

impl Classify for std::io::Error {
    fn kind(&self) -> FailureKind {
        FailureKind::Data
    }
}

impl Classify for SimIndexError {
    fn kind(&self) -> FailureKind {
        FailureKind::Data
    }
}

impl Classify for EvalError {
    fn kind(&self) -> FailureKind {
        FailureKind::Data
    }
}

impl Classify for ContrastiveError {
    fn kind(&self) -> FailureKind {
        match self {
            ContrastiveError::Config(_) => FailureKind::Config,
            _ => FailureKind::Data,
        }
    }
}

impl Classify for PartitionError {
    fn kind(&self) -> FailureKind {
        match self {
            PartitionError::Config(_) => FailureKind::Config,
            _ => FailureKind::Data,
        }
    }
}

impl Classify for OracleError {
    fn kind(&self) -> FailureKind {
        match self {
            OracleError::BudgetExhausted { .. } => FailureKind::Budget,
            OracleError::Config(_) => FailureKind::Config,
            _ => FailureKind::Oracle,
        }
    }
}

impl Classify for BirchError {
    fn kind(&self) -> FailureKind {
        match self {
            BirchError::Config(_) => FailureKind::Config,
            BirchError::Oracle(e) => e.kind(),
            _ => FailureKind::Data,
        }
    }
}

impl Classify for SynthError {
    fn kind(&self) -> FailureKind {
        match self {
            SynthError::Config(_) => FailureKind::Config,
            _ => FailureKind::Data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub terms: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            terms: None,
            embeddings: None,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub n_pos: usize,
    pub n_neg: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { n_pos: 15, n_neg: 15 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub steps: usize,
    pub refresh_every: usize,
    pub lr: f64,
    pub seed: u64,
    pub anchors_per_step: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        Self {
            steps: d.steps,
            refresh_every: d.refresh_every,
            lr: d.lr,
            seed: d.seed,
            anchors_per_step: d.anchors_per_step,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PartitionerConfig {
    pub k: usize,
    pub threshold: f64,
}

impl Default for PartitionerConfig {
    fn default() -> Self {
        Self { k: 100, threshold: 0.5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BirchSection {
    pub branching_factor: usize,
    pub seed: u64,
}

impl Default for BirchSection {
    fn default() -> Self {
        Self {
            branching_factor: DEFAULT_BRANCHING_FACTOR,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    Mock,
    Heuristic,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub kind: OracleKind,
    pub agreement_rate: f64,
    pub seed: u64,
    pub endpoint: Option<String>,
    pub model: String,
    /// Replay replies from a stored transcript instead of calling `endpoint`.
    pub transcript: Option<PathBuf>,
    /// Name of the environment variable holding the remote credential.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_in_flight: usize,
    pub requests_per_second: f64,
    pub budget_limit: Option<u64>,
    pub use_cache: bool,
    /// Defaults to a file under `cluster/` named after the oracle settings.
    pub cache_path: Option<PathBuf>,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            kind: OracleKind::Mock,
            agreement_rate: 1.0,
            seed: 0,
            endpoint: None,
            model: "gpt-3.5-turbo".into(),
            transcript: None,
            api_key_env: "TERMCLUST_API_KEY".into(),
            timeout_secs: 60.0,
            max_in_flight: 4,
            requests_per_second: 0.0,
            budget_limit: None,
            use_cache: true,
            cache_path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Labeled pair file; when absent a hard-negative set is built.
    pub pairs: Option<PathBuf>,
    pub n_neighbors: usize,
    pub anchor_seed: u64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            pairs: None,
            n_neighbors: 30,
            anchor_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    pub ingest: IngestOptions,
    pub loss: LossConfig,
    pub sampler: SamplerConfig,
    pub optimizer: OptimizerSection,
    pub partitioner: PartitionerConfig,
    pub birch: BirchSection,
    pub oracle: OracleConfig,
    pub eval: EvalSection,
    pub synth: SynthConfig,
}

fn config_err(message: impl Into<String>) -> PipelineError {
    PipelineError::new("config", FailureKind::Config, message)
}

/// Parses the right-hand side of a `key=value` override as a TOML value,
/// falling back to a bare string.
fn override_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), PipelineError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_err(format!("bad override key {key:?}")));
    }
    let (last, parents) = parts.split_last().expect("non-empty key");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override {key:?}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), override_value(raw.trim()));
    Ok(())
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl PipelineConfig {
    /// Parses a TOML document, applies `key=value` overrides and resolves
    /// relative paths against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: &Path, overrides: &[String]) -> Result<Self, PipelineError> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        for p in [
            cfg.paths.terms.as_mut(),
            cfg.paths.embeddings.as_mut(),
            Some(&mut cfg.paths.output_dir),
            cfg.oracle.transcript.as_mut(),
            cfg.oracle.cache_path.as_mut(),
            cfg.eval.pairs.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            resolve(base_dir, p);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or the defaults when `None`). Relative paths are taken
    /// from the config file's directory, or the working directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, PipelineError> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| config_err(format!("{}: {e}", p.display())))?;
                let base = p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
                Self::from_toml_str(&text, base, overrides)
            }
            None => Self::from_toml_str("", Path::new("."), overrides),
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.optimizer_config().validate().map_err(|e| e.at("config"))?;
        if self.ingest.max_words == 0 {
            return Err(config_err("ingest.max_words must be positive"));
        }
        if self.sampler.n_pos == 0 {
            return Err(config_err("sampler.n_pos must be positive"));
        }
        if self.partitioner.k == 0 {
            return Err(config_err("partitioner.k must be at least 1"));
        }
        if !(-1.0..=1.0).contains(&self.partitioner.threshold) {
            return Err(config_err("partitioner.threshold must lie in [-1, 1]"));
        }
        if self.birch.branching_factor < 2 {
            return Err(config_err("birch.branching_factor must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.oracle.agreement_rate) {
            return Err(config_err("oracle.agreement_rate must lie in [0, 1]"));
        }
        if !(self.oracle.timeout_secs.is_finite() && self.oracle.timeout_secs > 0.0) {
            return Err(config_err("oracle.timeout_secs must be positive"));
        }
        if self.oracle.max_in_flight == 0 {
            return Err(config_err("oracle.max_in_flight must be positive"));
        }
        if !self.oracle.requests_per_second.is_finite() || self.oracle.requests_per_second < 0.0 {
            return Err(config_err("oracle.requests_per_second must be non-negative"));
        }
        if self.oracle.kind == OracleKind::Remote && self.oracle.endpoint.is_none() && self.oracle.transcript.is_none() {
            return Err(config_err("remote oracle needs oracle.endpoint or oracle.transcript"));
        }
        Ok(())
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        OptimizerConfig {
            loss: self.loss,
            n_pos: self.sampler.n_pos,
            n_neg: self.sampler.n_neg,
            steps: self.optimizer.steps,
            refresh_every: self.optimizer.refresh_every,
            lr: self.optimizer.lr,
            anchors_per_step: self.optimizer.anchors_per_step,
            seed: self.optimizer.seed,
        }
    }

    /// SHA-256 of the canonical JSON form of the effective configuration.
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serializes"))
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.paths.output_dir.join(stage)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: String,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub seeds: BTreeMap<String, u64>,
    /// File path to SHA-256.
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub budget: Option<OracleBudget>,
    pub stats: serde_json::Value,
}

impl Manifest {
    pub fn read(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(MANIFEST);
        let file = File::open(&path).map_err(|e| data_err("manifest", &path, e))?;
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| PipelineError::new("manifest", FailureKind::Data, format!("{}: {e}", path.display())))
    }
}

fn data_err(stage: &'static str, path: &Path, e: impl std::fmt::Display) -> PipelineError {
    PipelineError::new(stage, FailureKind::Data, format!("{}: {e}", path.display()))
}

fn digests(stage: &'static str, files: &[&Path]) -> Result<BTreeMap<String, String>, PipelineError> {
    files
        .iter()
        .map(|p| Ok((p.display().to_string(), file_sha256(p).map_err(|e| data_err(stage, p, e))?)))
        .collect()
}

/// Writes through a temporary sibling so readers never see a torn file.
fn write_atomic(stage: &'static str, path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| data_err(stage, path, e))
}

fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

struct StageWriter<'a> {
    stage: &'static str,
    config: &'a PipelineConfig,
    dir: PathBuf,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seeds: BTreeMap<String, u64>,
}

impl<'a> StageWriter<'a> {
    fn begin(stage: &'static str, config: &'a PipelineConfig, dir: PathBuf) -> Result<Self, PipelineError> {
        fs::create_dir_all(&dir).map_err(|e| data_err(stage, &dir, e))?;
        Ok(Self {
            stage,
            config,
            dir,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seeds: BTreeMap::new(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }

    fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf, PipelineError> {
        let p = self.path(name);
        write_atomic(self.stage, &p, bytes)?;
        self.outputs.push(p.clone());
        Ok(p)
    }

    fn finish(self, stats: serde_json::Value, budget: Option<OracleBudget>) -> Result<Manifest, PipelineError> {
        let inputs: Vec<&Path> = self.inputs.iter().map(PathBuf::as_path).collect();
        let outputs: Vec<&Path> = self.outputs.iter().map(PathBuf::as_path).collect();
        let manifest = Manifest {
            stage: self.stage.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.config.hash(),
            config: self.config.clone(),
            seeds: self.seeds,
            inputs: digests(self.stage, &inputs)?,
            outputs: digests(self.stage, &outputs)?,
            budget,
            stats,
        };
        write_atomic(self.stage, &self.dir.join(MANIFEST), &to_json_bytes(&manifest))?;
        Ok(manifest)
    }
}

fn embedding_bytes(m: &EmbeddingMatrix) -> Vec<u8> {
    let mut buf = Vec::new();
    m.write_binary(&mut buf).expect("in-memory write");
    buf
}

fn terms_bytes(c: &Corpus) -> Vec<u8> {
    let mut buf = Vec::new();
    c.write_terms(&mut buf).expect("in-memory write");
    buf
}

/// Keeps the terms (and embedding rows) of at most `max_words` words.
fn filter_long_terms(corpus: Corpus, max_words: usize) -> Result<Corpus, CorpusError> {
    let keep: Vec<usize> = corpus
        .terms()
        .iter()
        .filter(|t| t.text.split_whitespace().count() <= max_words)
        .map(|t| t.term_id)
        .collect();
    if keep.len() == corpus.len() {
        return Ok(corpus);
    }
    let m = corpus.embeddings()?;
    let rows = keep.iter().flat_map(|&i| m.row(i).iter().copied()).collect();
    let matrix = EmbeddingMatrix::from_rows(m.dim(), rows)?;
    let records: Vec<_> = keep
        .iter()
        .map(|&i| {
            let t = &corpus.terms()[i];
            (t.source_id, t.concept_id.clone(), t.text.clone())
        })
        .collect();
    Corpus::from_records(records)?.with_embeddings(matrix)
}

pub fn cmd_ingest(cfg: &PipelineConfig) -> Result<Manifest, PipelineError> {
    const STAGE: &str = "ingest";
    let terms = cfg.paths.terms.as_deref().ok_or_else(|| config_err("paths.terms is not set"))?;
    let embeddings = cfg
        .paths
        .embeddings
        .as_deref()
        .ok_or_else(|| config_err("paths.embeddings is not set"))?;
    let unfiltered = IngestOptions {
        filter_long_terms: false,
        ..cfg.ingest
    };
    let corpus = Corpus::ingest_terms(terms, unfiltered)
        .map_err(|e| data_err(STAGE, terms, e))?
        .attach_embeddings(embeddings)
        .map_err(|e| data_err(STAGE, embeddings, e))?;
    let read = corpus.len();
    let corpus = if cfg.ingest.filter_long_terms {
        filter_long_terms(corpus, cfg.ingest.max_words).map_err(|e| e.at(STAGE))?
    } else {
        corpus
    };
    let dim = corpus.embeddings().map_err(|e| e.at(STAGE))?.dim();
    log::info!("ingested {} of {read} terms, dim {dim}", corpus.len());

    let mut w = StageWriter::begin(STAGE, cfg, cfg.stage_dir(STAGE))?;
    w.input(terms);
    w.input(embeddings);
    w.write("terms.tsv", &terms_bytes(&corpus))?;
    w.write("embeddings.bin", &embedding_bytes(corpus.embeddings().map_err(|e| e.at(STAGE))?))?;
    let stats = serde_json::json!({
        "terms": corpus.len(),
        "dropped": read - corpus.len(),
        "concepts": corpus.concept_index().len(),
        "dim": dim,
    });
    w.finish(stats, None)
}

/// Ingested terms with the newest embeddings: optimized ones when the
/// optimize stage has run, the ingested ones otherwise.
pub fn load_corpus(cfg: &PipelineConfig, stage: &'static str) -> Result<(Corpus, Vec<PathBuf>), PipelineError> {
    load_stage_corpus(cfg, stage, true)
}

fn load_stage_corpus(
    cfg: &PipelineConfig,
    stage: &'static str,
    prefer_optimized: bool,
) -> Result<(Corpus, Vec<PathBuf>), PipelineError> {
    let ingest = cfg.stage_dir("ingest");
    if !ingest.join(MANIFEST).exists() {
        return Err(PipelineError::new(
            stage,
            FailureKind::Data,
            format!("no ingested corpus under {}; run ingest first", ingest.display()),
        ));
    }
    let terms = ingest.join("terms.tsv");
    let optimized = cfg.stage_dir("optimize");
    let embeddings = if prefer_optimized && optimized.join(MANIFEST).exists() {
        optimized.join("embeddings.bin")
    } else {
        ingest.join("embeddings.bin")
    };
    let corpus = Corpus::ingest_terms(&terms, IngestOptions::default())
        .map_err(|e| data_err(stage, &terms, e))?
        .attach_embeddings(&embeddings)
        .map_err(|e| data_err(stage, &embeddings, e))?;
    Ok((corpus, vec![terms, embeddings]))
}

pub fn cmd_optimize(cfg: &PipelineConfig) -> Result<Manifest, PipelineError> {
    const STAGE: &str = "optimize";
    let (corpus, inputs) = load_stage_corpus(cfg, STAGE, false)?;
    let opt = cfg.optimizer_config();
    let outcome = optimize_embeddings(&corpus, &opt).map_err(|e| e.at(STAGE))?;
    let mut trace = Vec::new();
    write_loss_trace(&mut trace, &outcome.trace).map_err(|e| e.at(STAGE))?;

    let mut w = StageWriter::begin(STAGE, cfg, cfg.stage_dir(STAGE))?;
    inputs.iter().for_each(|p| w.input(p));
    w.seed("optimizer", opt.seed);
    w.write("embeddings.bin", &embedding_bytes(&outcome.embeddings))?;
    w.write("loss.csv", &trace)?;
    let stats = serde_json::json!({
        "steps": outcome.trace.len(),
        "index_rebuilds": outcome.index_rebuilds,
        "first_loss": outcome.trace.first(),
        "last_loss": outcome.trace.last(),
    });
    w.finish(stats, None)
}

pub fn cmd_partition(cfg: &PipelineConfig) -> Result<Manifest, PipelineError> {
    const STAGE: &str = "partition";
    let (corpus, inputs) = load_corpus(cfg, STAGE)?;
    let index = SimIndex::build(&corpus).map_err(|e| e.at(STAGE))?;
    let parts = build_partition(&index, cfg.partitioner.k, cfg.partitioner.threshold).map_err(|e| e.at(STAGE))?;
    let mut buf = Vec::new();
    parts.write_jsonl(&mut buf).map_err(|e| e.at(STAGE))?;

    let mut w = StageWriter::begin(STAGE, cfg, cfg.stage_dir(STAGE))?;
    inputs.iter().for_each(|p| w.input(p));
    w.write("partitions.jsonl", &buf)?;
    let sizes: Vec<usize> = parts.partitions().iter().map(Vec::len).collect();
    let stats = serde_json::json!({
        "terms": corpus.len(),
        "partitions": parts.len(),
        "largest": sizes.iter().max(),
        "singletons": sizes.iter().filter(|&&s| s == 1).count(),
    });
    w.finish(stats, None)
}

/// Final report of the cluster stage, also written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    #[serde(flatten)]
    pub summary: ClusterSummary,
    /// Oracle resolutions, cache hits included.
    pub queries: usize,
    pub partitions: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pairwise_f1: Option<f64>,
}

fn oracle_cache_path(cfg: &PipelineConfig) -> PathBuf {
    if let Some(p) = &cfg.oracle.cache_path {
        return p.clone();
    }
    let o = &cfg.oracle;
    let identity = serde_json::json!({
        "kind": o.kind,
        "agreement_rate": o.agreement_rate,
        "seed": o.seed,
        "endpoint": o.endpoint,
        "model": o.model,
    });
    let h = sha256_hex(identity.to_string().as_bytes());
    cfg.stage_dir("cluster").join(format!("oracle-cache-{}.jsonl", &h[..12]))
}

pub fn build_oracle(cfg: &PipelineConfig) -> Result<Oracle, PipelineError> {
    const STAGE: &str = "oracle";
    let o = &cfg.oracle;
    let backend: Box<dyn EquivalenceBackend> = match o.kind {
        OracleKind::Mock => Box::new(MockOracle::new(o.agreement_rate, o.seed).map_err(|e| e.at(STAGE))?),
        OracleKind::Heuristic => Box::new(HeuristicOracle),
        OracleKind::Remote => {
            let transport: Box<dyn ChatTransport> = match (&o.transcript, &o.endpoint) {
                (Some(path), _) => Box::new(FixtureTransport::load(path).map_err(|e| e.at(STAGE))?),
                (None, Some(url)) => Box::new(HttpTransport::from_env(
                    url.clone(),
                    &o.api_key_env,
                    Duration::from_secs_f64(o.timeout_secs),
                )),
                (None, None) => return Err(config_err("remote oracle needs oracle.endpoint or oracle.transcript")),
            };
            Box::new(RemoteOracle::new(
                transport,
                o.model.clone(),
                RateLimiter::new(o.max_in_flight, o.requests_per_second),
            ))
        }
    };
    let oracle = Oracle::new(backend).with_limit(o.budget_limit);
    if !o.use_cache {
        return Ok(oracle);
    }
    let path = oracle_cache_path(cfg);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| data_err(STAGE, dir, e))?;
    }
    oracle.with_cache_file(&path).map_err(|e| e.at(STAGE))
}

pub fn cmd_cluster(cfg: &PipelineConfig, resume: bool) -> Result<(ClusterReport, Manifest), PipelineError> {
    const STAGE: &str = "cluster";
    let (corpus, mut inputs) = load_corpus(cfg, STAGE)?;
    let part_dir = cfg.stage_dir("partition");
    let part_file = part_dir.join("partitions.jsonl");
    if !part_dir.join(MANIFEST).exists() {
        return Err(PipelineError::new(
            STAGE,
            FailureKind::Data,
            format!("no partitions under {}; run partition first", part_dir.display()),
        ));
    }
    let file = File::open(&part_file).map_err(|e| data_err(STAGE, &part_file, e))?;
    let parts = PartitionSet::read_jsonl(BufReader::new(file), corpus.len()).map_err(|e| data_err(STAGE, &part_file, e))?;
    inputs.push(part_file);

    let dir = cfg.stage_dir(STAGE);
    let mut w = StageWriter::begin(STAGE, cfg, dir.clone())?;
    let oracle = build_oracle(cfg)?;
    let config = ClusterConfig {
        branching_factor: cfg.birch.branching_factor,
        seed: cfg.birch.seed,
        checkpoint_dir: Some(dir.join("checkpoints")),
        resume,
    };
    let run = run_clustering(&corpus, &parts, &oracle, &config).map_err(|e| e.at(STAGE))?;
    if !run.failures.is_empty() {
        for f in &run.failures {
            log::error!("partition {} failed: {}", f.partition, f.error);
        }
        let worst = run
            .failures
            .iter()
            .find(|f| f.error.kind() == FailureKind::Budget)
            .unwrap_or(&run.failures[0]);
        return Err(PipelineError::new(
            STAGE,
            worst.error.kind(),
            format!(
                "{} of {} partitions failed (first: partition {}: {}); rerun with --resume to continue",
                run.failures.len(),
                parts.len(),
                worst.partition,
                worst.error
            ),
        ));
    }
    if run.resumed_partitions > 0 {
        log::info!("reused {} partition checkpoints", run.resumed_partitions);
    }

    let report = ClusterReport {
        summary: run.assignment.summary(),
        queries: run.queries,
        partitions: parts.len(),
        pairwise_f1: score_clustering(&run.assignment, &corpus).ok().map(|r| r.f1),
    };
    let mut tsv = Vec::new();
    run.assignment.write_tsv(&mut tsv).map_err(|e| e.at(STAGE))?;
    inputs.iter().for_each(|p| w.input(p));
    w.seed("birch", cfg.birch.seed);
    if cfg.oracle.kind == OracleKind::Mock {
        w.seed("oracle", cfg.oracle.seed);
    }
    w.write("clusters.tsv", &tsv)?;
    w.write("summary.json", &to_json_bytes(&report))?;
    let stats = serde_json::to_value(&report).expect("serializable");
    let manifest = w.finish(stats, Some(oracle.budget()))?;
    Ok((report, manifest))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub pairs: usize,
    pub positives: usize,
    /// Best-F1 cosine threshold over the pair set.
    pub threshold_sweep: EvalReport,
    /// Pair metrics of the cluster stage output, when it exists.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub clustering: Option<EvalReport>,
}

pub fn cmd_eval(cfg: &PipelineConfig) -> Result<(EvalOutput, Manifest), PipelineError> {
    const STAGE: &str = "eval";
    let (corpus, mut inputs) = load_corpus(cfg, STAGE)?;
    let mut seeds = BTreeMap::new();
    let pairs = match &cfg.eval.pairs {
        Some(path) => {
            let file = File::open(path).map_err(|e| data_err(STAGE, path, e))?;
            let pairs = PairSet::read_tsv(BufReader::new(file)).map_err(|e| data_err(STAGE, path, e))?;
            pairs.validate(&corpus).map_err(|e| data_err(STAGE, path, e))?;
            inputs.push(path.clone());
            pairs
        }
        None => {
            let index = SimIndex::build(&corpus).map_err(|e| e.at(STAGE))?;
            let anchors = choose_anchors(&corpus, cfg.eval.anchor_seed);
            seeds.insert("anchors".to_string(), cfg.eval.anchor_seed);
            build_hard_negative_set(&corpus, &index, &anchors, cfg.eval.n_neighbors).map_err(|e| e.at(STAGE))?
        }
    };
    let sweep = best_f1_sweep(&pairs, &corpus).map_err(|e| e.at(STAGE))?;

    let clusters = cfg.stage_dir("cluster").join("clusters.tsv");
    let clustering = if cfg.stage_dir("cluster").join(MANIFEST).exists() {
        let file = File::open(&clusters).map_err(|e| data_err(STAGE, &clusters, e))?;
        let assignment = crate::birch::ClusterAssignment::read_tsv(BufReader::new(file), corpus.len())
            .map_err(|e| data_err(STAGE, &clusters, e))?;
        inputs.push(clusters);
        Some(score_clustering(&assignment, &corpus).map_err(|e| e.at(STAGE))?)
    } else {
        None
    };
    let out = EvalOutput {
        pairs: pairs.len(),
        positives: pairs.positives(),
        threshold_sweep: sweep,
        clustering,
    };

    let mut w = StageWriter::begin(STAGE, cfg, cfg.stage_dir(STAGE))?;
    inputs.iter().for_each(|p| w.input(p));
    seeds.into_iter().for_each(|(k, v)| w.seed(&k, v));
    let mut tsv = Vec::new();
    pairs.write_tsv(&mut tsv).map_err(|e| e.at(STAGE))?;
    w.write("pairs.tsv", &tsv)?;
    w.write("report.json", &to_json_bytes(&out))?;
    let manifest = w.finish(serde_json::to_value(&out).expect("serializable"), None)?;
    Ok((out, manifest))
}

/// Writes a synthetic labeled corpus (`terms.tsv`, `embeddings.bin`) to `out`,
/// or to `<output_dir>/synth` when `out` is `None`.
pub fn cmd_synth(cfg: &PipelineConfig, out: Option<&Path>) -> Result<Manifest, PipelineError> {
    const STAGE: &str = "synth";
    let generated = synth::generate(&cfg.synth).map_err(|e| e.at(STAGE))?;
    let dir = out.map_or_else(|| cfg.stage_dir(STAGE), Path::to_path_buf);
    let mut w = StageWriter::begin(STAGE, cfg, dir)?;
    w.seed("synth", cfg.synth.seed);
    let corpus = &generated.corpus;
    w.write("terms.tsv", &terms_bytes(corpus))?;
    w.write("embeddings.bin", &embedding_bytes(corpus.embeddings().map_err(|e| e.at(STAGE))?))?;
    let stats = serde_json::json!({
        "terms": corpus.len(),
        "concepts": corpus.concept_index().len(),
        "min_intra": generated.min_intra,
        "max_inter": generated.max_inter,
    });
    w.finish(stats, None)
}

/// Writes `value` as pretty JSON to a writer, newline-terminated.
pub fn write_json<W: Write, T: Serialize>(mut w: W, value: &T) -> std::io::Result<()> {
    w.write_all(&to_json_bytes(value))?;
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = PipelineConfig::from_toml_str(
            "partitioner.k = 10\n[birch]\nseed = 3\n",
            Path::new("/base"),
            &["partitioner.threshold=0.7".into(), "oracle.kind=heuristic".into()],
        )
        .unwrap();
        assert_eq!(cfg.partitioner.k, 10);
        assert_eq!(cfg.partitioner.threshold, 0.7);
        assert_eq!(cfg.birch.seed, 3);
        assert_eq!(cfg.birch.branching_factor, 16);
        assert_eq!(cfg.oracle.kind, OracleKind::Heuristic);
        assert_eq!(cfg.loss.alpha, 2.0);
        assert_eq!(cfg.paths.output_dir, Path::new("/base/out"));
    }

    #[test]
    fn unknown_keys_rejected() {
        for (text, set) in [("partitioner.kk = 3", vec![]), ("", vec!["birch.b=3".to_string()])] {
            let e = PipelineConfig::from_toml_str(text, Path::new("."), &set).unwrap_err();
            assert_eq!(e.kind, FailureKind::Config, "{e}");
        }
    }

    #[test]
    fn domain_checks() {
        for set in ["partitioner.threshold=1.5", "birch.branching_factor=1", "optimizer.lr=0", "oracle.kind=remote"] {
            let e = PipelineConfig::from_toml_str("", Path::new("."), &[set.to_string()]).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{set}: {e}");
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.birch.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn exit_codes_distinct() {
        let codes: Vec<i32> = [FailureKind::Config, FailureKind::Data, FailureKind::Oracle, FailureKind::Budget]
            .iter()
            .map(|k| k.exit_code())
            .collect();
        assert_eq!(codes, vec![2, 3, 4, 5]);
        assert_eq!(
            BirchError::Oracle(OracleError::BudgetExhausted { limit: 3 }).kind(),
            FailureKind::Budget
        );
    }
}
