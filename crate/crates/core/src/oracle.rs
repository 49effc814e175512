//! Pairwise equivalence judgments: "do these two terms name the same concept?"
//!
//! [`Oracle`] wraps a backend with a symmetric verdict cache and a query
//! budget. Backends are a gold-label mock with tunable agreement, a lexical
//! heuristic for offline smoke runs, and a chat-completion client.

use std::collections::HashMap;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::TermRecord;

pub const CLUSTERING_SYSTEM_PROMPT: &str = "You are a helpful assistant for term clustering.";

pub const EXPLANATION_SYSTEM_PROMPT: &str = "You are a helpful assistant for providing explanations of biomedical terms. You should be regardless of capitalization.";

pub fn equivalence_prompt(a: &str, b: &str) -> String {
    format!("Do the terms {a} and {b} have roughly the same meaning? Please answer with yes or no only.")
}

pub fn explanation_prompt(term: &str) -> String {
    format!("What is the term '{term}'? Please explain in 50 words as if in a dictionary.")
}

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("oracle unavailable: {0}")]
    Unavailable(String),
    #[error("unparseable reply: {0:?}")]
    UnparseableReply(String),
    #[error("oracle budget of {limit} queries exhausted")]
    BudgetExhausted { limit: u64 },
    #[error("mock oracle needs gold labels, term {0:?} has none")]
    MissingGold(String),
    #[error("invalid oracle configuration: {0}")]
    Config(String),
    #[error("verdict cache: {0}")]
    Cache(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictSource {
    Mock,
    Heuristic,
    Remote,
    Cache,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleVerdict {
    pub same: bool,
    pub source: VerdictSource,
    pub latency: Duration,
}

/// What a backend sees of a term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermRef<'a> {
    pub text: &'a str,
    pub concept: Option<&'a str>,
}

impl<'a> TermRef<'a> {
    pub fn new(text: &'a str, concept: Option<&'a str>) -> Self {
        Self { text, concept }
    }
}

impl<'a> From<&'a TermRecord> for TermRef<'a> {
    fn from(t: &'a TermRecord) -> Self {
        Self {
            text: &t.text,
            concept: t.concept_id.as_deref(),
        }
    }
}

pub trait EquivalenceBackend: Send + Sync {
    fn source(&self) -> VerdictSource;
    fn decide(&self, a: TermRef<'_>, b: TermRef<'_>) -> Result<bool, OracleError>;
}

/// Gold concept equality, flipped per unordered pair with probability
/// `1 - agreement_rate`. The flip is a pure function of the seed and the pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MockOracle {
    pub agreement_rate: f64,
    pub rng_seed: u64,
}

impl MockOracle {
    pub fn new(agreement_rate: f64, rng_seed: u64) -> Result<Self, OracleError> {
        if !(0.0..=1.0).contains(&agreement_rate) {
            return Err(OracleError::Config(format!(
                "agreement_rate {agreement_rate} outside [0, 1]"
            )));
        }
        Ok(Self {
            agreement_rate,
            rng_seed,
        })
    }

    pub fn perfect() -> Self {
        Self {
            agreement_rate: 1.0,
            rng_seed: 0,
        }
    }

    /// Uniform draw in `[0, 1)` for the unordered pair.
    fn pair_uniform(&self, a: &str, b: &str) -> f64 {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let mut h = Sha256::new();
        h.update(self.rng_seed.to_le_bytes());
        h.update(lo.as_bytes());
        h.update([0u8]);
        h.update(hi.as_bytes());
        let digest = h.finalize();
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        (u64::from_le_bytes(word) >> 11) as f64 / (1u64 << 53) as f64
    }
}

impl EquivalenceBackend for MockOracle {
    fn source(&self) -> VerdictSource {
        VerdictSource::Mock
    }

    fn decide(&self, a: TermRef<'_>, b: TermRef<'_>) -> Result<bool, OracleError> {
        let ca = a.concept.ok_or_else(|| OracleError::MissingGold(a.text.to_string()))?;
        let cb = b.concept.ok_or_else(|| OracleError::MissingGold(b.text.to_string()))?;
        let gold = ca == cb;
        let flip = self.pair_uniform(a.text, b.text) >= self.agreement_rate;
        Ok(gold != flip)
    }
}

/// Equality of normalized strings: lowercased, punctuation replaced by
/// spaces, tokens sorted. Only meant for offline smoke runs.
#[derive(Debug, Clone, Copy, Default)]
pub struct HeuristicOracle;

pub fn normalize_for_heuristic(s: &str) -> String {
    let cleaned: String = s
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect();
    let mut tokens: Vec<&str> = cleaned.split_whitespace().collect();
    tokens.sort_unstable();
    tokens.join(" ")
}

impl EquivalenceBackend for HeuristicOracle {
    fn source(&self) -> VerdictSource {
        VerdictSource::Heuristic
    }

    fn decide(&self, a: TermRef<'_>, b: TermRef<'_>) -> Result<bool, OracleError> {
        Ok(normalize_for_heuristic(a.text) == normalize_for_heuristic(b.text))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Body of a chat-completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub temperature: f64,
    pub messages: Vec<ChatMessage>,
}

impl ChatRequest {
    fn new(model: &str, system: &str, user: String) -> Self {
        Self {
            model: model.to_string(),
            temperature: 0.0,
            messages: vec![
                ChatMessage {
                    role: "system".into(),
                    content: system.into(),
                },
                ChatMessage {
                    role: "user".into(),
                    content: user,
                },
            ],
        }
    }

    pub fn equivalence(model: &str, a: &str, b: &str) -> Self {
        Self::new(model, CLUSTERING_SYSTEM_PROMPT, equivalence_prompt(a, b))
    }

    pub fn explanation(model: &str, term: &str) -> Self {
        Self::new(model, EXPLANATION_SYSTEM_PROMPT, explanation_prompt(term))
    }
}

/// Sends one chat request and returns the assistant message content.
pub trait ChatTransport: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, OracleError>;
}

/// OpenAI-style `POST` with a bearer credential.
pub struct HttpTransport {
    endpoint: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

impl fmt::Debug for HttpTransport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpTransport")
            .field("endpoint", &self.endpoint)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            api_key,
            agent,
        }
    }

    /// Reads the credential from the environment variable `var`, if set.
    pub fn from_env(endpoint: impl Into<String>, var: &str, timeout: Duration) -> Self {
        Self::new(endpoint, std::env::var(var).ok(), timeout)
    }
}

#[derive(Deserialize)]
struct CompletionReply {
    choices: Vec<CompletionChoice>,
}

#[derive(Deserialize)]
struct CompletionChoice {
    message: ChatMessage,
}

impl ChatTransport for HttpTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String, OracleError> {
        let mut req = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(request)
            .map_err(|e| OracleError::Unavailable(e.to_string()))?;
        let reply: CompletionReply = resp
            .body_mut()
            .read_json()
            .map_err(|e| OracleError::Unavailable(format!("bad completion body: {e}")))?;
        reply
            .choices
            .into_iter()
            .next()
            .map(|c| c.message.content)
            .ok_or_else(|| OracleError::Unavailable("completion without choices".into()))
    }
}

/// Replays stored request/reply pairs.
#[derive(Debug, Clone, Default)]
pub struct FixtureTransport {
    replies: HashMap<String, String>,
}

#[derive(Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub request: ChatRequest,
    pub reply: String,
}

impl FixtureTransport {
    fn key(request: &ChatRequest) -> String {
        serde_json::to_string(request).expect("chat request serializes")
    }

    pub fn from_entries(entries: Vec<TranscriptEntry>) -> Self {
        Self {
            replies: entries
                .into_iter()
                .map(|e| (Self::key(&e.request), e.reply))
                .collect(),
        }
    }

    /// Loads a JSON array of `{"request": ..., "reply": ...}` objects.
    pub fn load(path: &Path) -> Result<Self, OracleError> {
        let entries: Vec<TranscriptEntry> = serde_json::from_reader(BufReader::new(File::open(path)?))
            .map_err(|e| OracleError::Config(format!("transcript {}: {e}", path.display())))?;
        Ok(Self::from_entries(entries))
    }
}

impl ChatTransport for FixtureTransport {
    fn complete(&self, request: &ChatRequest) -> Result<String, OracleError> {
        self.replies
            .get(&Self::key(request))
            .cloned()
            .ok_or_else(|| OracleError::Unavailable("no recorded reply for request".into()))
    }
}

/// Caps concurrent requests and spaces request starts.
#[derive(Debug)]
pub struct RateLimiter {
    max_in_flight: usize,
    min_interval: Duration,
    state: Mutex<LimiterState>,
    freed: Condvar,
}

#[derive(Debug)]
struct LimiterState {
    in_flight: usize,
    next_start: Instant,
}

pub struct Permit<'a>(&'a RateLimiter);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut st = self.0.state.lock().unwrap_or_else(|e| e.into_inner());
        st.in_flight -= 1;
        self.0.freed.notify_one();
    }
}

impl RateLimiter {
    /// `requests_per_second <= 0` disables spacing.
    pub fn new(max_in_flight: usize, requests_per_second: f64) -> Self {
        let min_interval = if requests_per_second > 0.0 {
            Duration::from_secs_f64(1.0 / requests_per_second)
        } else {
            Duration::ZERO
        };
        Self {
            max_in_flight: max_in_flight.max(1),
            min_interval,
            state: Mutex::new(LimiterState {
                in_flight: 0,
                next_start: Instant::now(),
            }),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        while st.in_flight >= self.max_in_flight {
            st = self.freed.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        st.in_flight += 1;
        let now = Instant::now();
        let start = st.next_start.max(now);
        st.next_start = start + self.min_interval;
        drop(st);
        if start > now {
            std::thread::sleep(start - now);
        }
        Permit(self)
    }
}

/// Leading `yes` or `no`, case-insensitive, ignoring surrounding punctuation.
pub fn parse_remote_reply(raw: &str) -> Result<bool, OracleError> {
    let lowered = raw.to_lowercase();
    let word: String = lowered
        .trim_start_matches(|c: char| !c.is_alphanumeric())
        .chars()
        .take_while(|c| c.is_alphanumeric())
        .collect();
    match word.as_str() {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(OracleError::UnparseableReply(raw.to_string())),
    }
}

/// Chat-completion backend. Each call is retried once on a transport failure
/// or an unparseable reply.
pub struct RemoteOracle {
    transport: Box<dyn ChatTransport>,
    model: String,
    limiter: RateLimiter,
}

impl RemoteOracle {
    pub fn new(transport: Box<dyn ChatTransport>, model: impl Into<String>, limiter: RateLimiter) -> Self {
        Self {
            transport,
            model: model.into(),
            limiter,
        }
    }

    fn send(&self, request: &ChatRequest) -> Result<String, OracleError> {
        let _permit = self.limiter.acquire();
        self.transport.complete(request)
    }

    /// Dictionary-style explanation of `term`, returned verbatim.
    pub fn explain_term(&self, term: &str) -> Result<String, OracleError> {
        if term.trim().is_empty() {
            return Err(OracleError::Precondition("empty term".into()));
        }
        let request = ChatRequest::explanation(&self.model, term);
        self.send(&request).or_else(|e| {
            log::warn!("explanation request failed, retrying once: {e}");
            self.send(&request)
        })
    }
}

impl EquivalenceBackend for RemoteOracle {
    fn source(&self) -> VerdictSource {
        VerdictSource::Remote
    }

    fn decide(&self, a: TermRef<'_>, b: TermRef<'_>) -> Result<bool, OracleError> {
        let request = ChatRequest::equivalence(&self.model, a.text, b.text);
        let attempt = || self.send(&request).and_then(|r| parse_remote_reply(&r));
        attempt().or_else(|e| {
            log::warn!("judgment request failed, retrying once: {e}");
            attempt()
        })
    }
}

/// Snapshot of budget counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OracleBudget {
    pub queries_issued: u64,
    pub cache_hits: u64,
    pub limit: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct CacheLine {
    a: String,
    b: String,
    same: bool,
}

type PairKey = (String, String);

fn pair_key(a: &str, b: &str) -> PairKey {
    if a <= b {
        (a.to_string(), b.to_string())
    } else {
        (b.to_string(), a.to_string())
    }
}

/// A backend plus verdict cache and budget accounting. Safe to share across
/// threads.
pub struct Oracle {
    backend: Box<dyn EquivalenceBackend>,
    cache: Mutex<HashMap<PairKey, bool>>,
    cache_file: Option<Mutex<BufWriter<File>>>,
    issued: AtomicU64,
    hits: AtomicU64,
    limit: Option<u64>,
}

impl fmt::Debug for Oracle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Oracle")
            .field("source", &self.backend.source())
            .field("budget", &self.budget())
            .finish()
    }
}

impl Oracle {
    pub fn new(backend: Box<dyn EquivalenceBackend>) -> Self {
        Self {
            backend,
            cache: Mutex::new(HashMap::new()),
            cache_file: None,
            issued: AtomicU64::new(0),
            hits: AtomicU64::new(0),
            limit: None,
        }
    }

    pub fn mock(mock: MockOracle) -> Self {
        Self::new(Box::new(mock))
    }

    pub fn with_limit(mut self, limit: Option<u64>) -> Self {
        self.limit = limit;
        self
    }

    /// Loads verdicts from a JSON-lines cache file (if present) and appends
    /// every new verdict to it. A torn final line is ignored.
    pub fn with_cache_file(mut self, path: &Path) -> Result<Self, OracleError> {
        if path.exists() {
            let lines: Vec<String> = BufReader::new(File::open(path)?)
                .lines()
                .collect::<Result<_, _>>()?;
            let last = lines.len().saturating_sub(1);
            let mut cache = self.cache.lock().unwrap_or_else(|e| e.into_inner());
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<CacheLine>(line) {
                    Ok(c) => {
                        cache.insert(pair_key(&c.a, &c.b), c.same);
                    }
                    Err(e) if i == last => {
                        log::warn!("ignoring torn last line of {}: {e}", path.display());
                    }
                    Err(e) => {
                        return Err(OracleError::Cache(format!(
                            "{} line {}: {e}",
                            path.display(),
                            i + 1
                        )))
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        self.cache_file = Some(Mutex::new(BufWriter::new(file)));
        Ok(self)
    }

    pub fn source(&self) -> VerdictSource {
        self.backend.source()
    }

    pub fn budget(&self) -> OracleBudget {
        OracleBudget {
            queries_issued: self.issued.load(Ordering::SeqCst),
            cache_hits: self.hits.load(Ordering::SeqCst),
            limit: self.limit,
        }
    }

    pub fn cached_pairs(&self) -> usize {
        self.cache.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    fn reserve(&self) -> Result<(), OracleError> {
        match self.limit {
            None => {
                self.issued.fetch_add(1, Ordering::SeqCst);
                Ok(())
            }
            Some(limit) => self
                .issued
                .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |q| (q < limit).then_some(q + 1))
                .map(|_| ())
                .map_err(|_| OracleError::BudgetExhausted { limit }),
        }
    }

    /// Judges an unordered pair. Cached pairs cost no budget.
    pub fn judge(&self, a: TermRef<'_>, b: TermRef<'_>) -> Result<OracleVerdict, OracleError> {
        if a.text.trim().is_empty() || b.text.trim().is_empty() {
            return Err(OracleError::Precondition("empty term text".into()));
        }
        let key = pair_key(a.text, b.text);
        if let Some(&same) = self.cache.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(OracleVerdict {
                same,
                source: VerdictSource::Cache,
                latency: Duration::ZERO,
            });
        }
        self.reserve()?;
        let started = Instant::now();
        let same = match self.backend.decide(a, b) {
            Ok(v) => v,
            Err(e) => {
                self.issued.fetch_sub(1, Ordering::SeqCst);
                return Err(e);
            }
        };
        let source = self.backend.source();
        let latency = match source {
            VerdictSource::Mock => Duration::ZERO,
            _ => started.elapsed(),
        };
        self.cache
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(key.clone(), same);
        if let Some(file) = &self.cache_file {
            let mut w = file.lock().unwrap_or_else(|e| e.into_inner());
            let line = CacheLine {
                a: key.0,
                b: key.1,
                same,
            };
            serde_json::to_writer(&mut *w, &line).map_err(|e| OracleError::Cache(e.to_string()))?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        Ok(OracleVerdict {
            same,
            source,
            latency,
        })
    }
}
