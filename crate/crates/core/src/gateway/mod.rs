//! Uniform access to text models.
//!
//! The gateway offers three calls: free-form continuation ([`Gateway::sample`]),
//! per-choice scoring ([`Gateway::score_choices`]) and token counting
//! ([`Gateway::count_tokens`]). Each call is cached on disk by a content hash
//! of its inputs, bounded by a per-backend concurrency limit, and retried with
//! exponential backoff on transient failures.

mod cache;
mod limiter;
pub mod remote;
pub mod scripted;

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::answer::{AnswerDistribution, DistributionError, ExtractionMethod};
use crate::prompts::Dialogue;

pub use cache::Cache;
use limiter::Limiter;
pub use remote::{HttpTransport, RemoteConfig, Transport, TransportError};
pub use scripted::{AnswerKey, ScriptedModel};

/// Decoding parameters for one generation call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingParams {
    pub temperature: f64,
    pub nucleus_p: f64,
    pub max_tokens: u32,
    pub stop_sequences: Vec<String>,
    pub seed: Option<u64>,
}

pub const DEFAULT_TEMPERATURE: f64 = 0.8;
pub const DEFAULT_NUCLEUS_P: f64 = 0.95;
pub const MISTAKE_MAX_TOKENS: u32 = 30;
pub const HUMAN_STOP: &str = "\n\nHuman:";

impl Default for SamplingParams {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            nucleus_p: DEFAULT_NUCLEUS_P,
            max_tokens: 512,
            stop_sequences: vec![HUMAN_STOP.to_string()],
            seed: None,
        }
    }
}

impl SamplingParams {
    /// CoT sampling parameters capped at 30 tokens, for mistake generation.
    pub fn mistake() -> Self {
        Self { max_tokens: MISTAKE_MAX_TOKENS, ..Self::default() }
    }

    /// Greedy decoding with a small budget, for forced final answers.
    pub fn greedy(max_tokens: u32) -> Self {
        Self { temperature: 0.0, nucleus_p: 1.0, max_tokens, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::Config(format!("temperature {} must be >= 0", self.temperature)));
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return Err(GatewayError::Config(format!("nucleus_p {} must be in (0, 1]", self.nucleus_p)));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::Config("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Short content hash stored on every record.
    pub fn hash(&self) -> String {
        short_hash(&serde_json::to_string(self).expect("params serialize"))
    }
}

pub(crate) fn short_hash(s: &str) -> String {
    let digest = Sha256::digest(s.as_bytes());
    hex::encode(&digest[..8])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateLimits {
    pub max_parallel: usize,
    pub min_interval_ms: u64,
}

impl Default for RateLimits {
    fn default() -> Self {
        Self { max_parallel: 4, min_interval_ms: 0 }
    }
}

/// Exponential backoff: attempt `k` (1-based) waits `base * 2^(k-1)` capped
/// at `max_delay_ms` before the next try.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 4, base_delay_ms: 500, max_delay_ms: 30_000 }
    }
}

impl RetryPolicy {
    pub fn delay_after(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    Scripted { script: String },
    RemoteHttp(RemoteConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    #[serde(flatten)]
    pub kind: BackendKind,
    #[serde(default)]
    pub limits: RateLimits,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default)]
    pub cache_namespace: Option<String>,
}

impl BackendDescriptor {
    pub fn scripted(script: &str) -> Self {
        Self {
            name: format!("scripted:{script}"),
            kind: BackendKind::Scripted { script: script.to_string() },
            limits: RateLimits::default(),
            retry: RetryPolicy { max_attempts: 1, base_delay_ms: 0, max_delay_ms: 0 },
            cache_namespace: None,
        }
    }

    /// Parses the `--backend` shorthand. Only `scripted:<id>` is accepted;
    /// remote backends are declared in the config file.
    pub fn from_flag(flag: &str) -> Result<Self, GatewayError> {
        match flag.split_once(':') {
            Some(("scripted", id)) if !id.is_empty() => Ok(Self::scripted(id)),
            _ => Err(GatewayError::Config(format!(
                "unsupported --backend '{flag}'; use scripted:<id> or declare the backend in the config file"
            ))),
        }
    }

    pub fn is_scripted(&self) -> bool {
        matches!(self.kind, BackendKind::Scripted { .. })
    }

    /// Identity used in cache keys: name, kind and namespace, not limits.
    pub fn fingerprint(&self) -> String {
        let kind = serde_json::to_string(&self.kind).expect("kind serializes");
        format!("{}|{}|{}", self.name, kind, self.cache_namespace.as_deref().unwrap_or(""))
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.name.is_empty() {
            return Err(GatewayError::Config("backend name is empty".into()));
        }
        if self.limits.max_parallel == 0 {
            return Err(GatewayError::Config(format!("backend {}: max_parallel must be positive", self.name)));
        }
        if self.retry.max_attempts == 0 {
            return Err(GatewayError::Config(format!("backend {}: max_attempts must be positive", self.name)));
        }
        if let BackendKind::RemoteHttp(cfg) = &self.kind {
            cfg.validate().map_err(|e| GatewayError::Config(format!("backend {}: {e}", self.name)))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackendError {
    #[error("transient: {0}")]
    Transient(String),
    #[error("fatal: {0}")]
    Fatal(String),
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("backend {backend} failed after {} attempts: {}", attempts.len(), attempts.join("; "))]
    Exhausted { backend: String, attempts: Vec<String> },
    #[error("backend {backend}: {message}")]
    Fatal { backend: String, message: String },
    #[error("configuration: {0}")]
    Config(String),
    #[error("no answer label could be parsed from {raw:?}")]
    NoLabel { raw: String },
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error("cache: {0}")]
    Cache(#[from] std::io::Error),
}

impl GatewayError {
    /// True when the failure came from the backend itself rather than local
    /// configuration or parsing.
    pub fn is_backend_failure(&self) -> bool {
        matches!(self, GatewayError::Exhausted { .. } | GatewayError::Fatal { .. })
    }
}

/// A model reachable by the gateway. Implementations must be reentrant.
pub trait ModelBackend: Send + Sync {
    /// Text continuing the dialogue's open prefix.
    fn complete(&self, dialogue: &Dialogue, params: &SamplingParams, sample_index: u64) -> Result<String, BackendError>;

    /// Raw non-negative scores for each label as the next token, or `None`
    /// when the backend cannot provide token scores.
    fn label_scores(&self, dialogue: &Dialogue, labels: &[String]) -> Result<Option<Vec<f64>>, BackendError>;

    /// Token count from the backend's tokenizer, or `None` if unavailable.
    fn token_count(&self, text: &str) -> Result<Option<usize>, BackendError>;

    /// Whether `max_tokens` counts whitespace units (applied by the gateway).
    fn whitespace_tokens(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    /// Backend attempts used; zero when served from cache.
    pub attempts: u32,
    pub cached: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCount {
    pub count: usize,
    /// Set when the backend had no tokenizer and whitespace units were used.
    pub fallback: bool,
}

/// Whitespace-delimited unit count.
pub fn whitespace_token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Keeps the first `max` whitespace-delimited units of `text`, preserving
/// the original spacing between them.
pub fn truncate_whitespace_tokens(text: &str, max: usize) -> &str {
    let mut seen = 0;
    let mut in_token = false;
    for (i, c) in text.char_indices() {
        if c.is_whitespace() {
            if in_token && seen == max {
                return &text[..i];
            }
            in_token = false;
        } else if !in_token {
            in_token = true;
            seen += 1;
            if seen > max {
                return text[..i].trim_end();
            }
        }
    }
    text
}

fn cut_at_stop<'a>(text: &'a str, stops: &[String]) -> &'a str {
    let cut = stops.iter().filter(|s| !s.is_empty()).filter_map(|s| text.find(s.as_str())).min();
    match cut {
        Some(pos) => &text[..pos],
        None => text,
    }
}

#[derive(Default)]
struct GatewayStats {
    backend_calls: AtomicU64,
    cache_hits: AtomicU64,
}

/// Shared access point for every backend used in a run.
pub struct Gateway {
    cache: Option<Cache>,
    answer_key: Arc<AnswerKey>,
    transport: Arc<dyn Transport>,
    overrides: Mutex<HashMap<String, Arc<dyn ModelBackend>>>,
    resolved: Mutex<HashMap<String, Arc<dyn ModelBackend>>>,
    limiters: Mutex<HashMap<String, Arc<Limiter>>>,
    stats: GatewayStats,
    sleep: bool,
}

impl Gateway {
    pub fn new(cache_dir: Option<PathBuf>) -> Self {
        Self {
            cache: cache_dir.map(Cache::new),
            answer_key: Arc::new(AnswerKey::default()),
            transport: Arc::new(HttpTransport::new()),
            overrides: Mutex::new(HashMap::new()),
            resolved: Mutex::new(HashMap::new()),
            limiters: Mutex::new(HashMap::new()),
            stats: GatewayStats::default(),
            sleep: true,
        }
    }

    /// Gold answers that scripted oracles may consult.
    pub fn with_answer_key(mut self, key: AnswerKey) -> Self {
        self.answer_key = Arc::new(key);
        self
    }

    pub fn with_transport(mut self, transport: Arc<dyn Transport>) -> Self {
        self.transport = transport;
        self
    }

    /// Skips backoff sleeps; attempts are still counted.
    pub fn without_backoff_sleep(mut self) -> Self {
        self.sleep = false;
        self
    }

    /// Serves every descriptor named `name` from `backend`.
    pub fn register_backend(&self, name: &str, backend: Arc<dyn ModelBackend>) {
        self.overrides.lock().insert(name.to_string(), backend);
        self.resolved.lock().remove(name);
    }

    pub fn backend_calls(&self) -> u64 {
        self.stats.backend_calls.load(Ordering::Relaxed)
    }

    pub fn cache_hits(&self) -> u64 {
        self.stats.cache_hits.load(Ordering::Relaxed)
    }

    fn resolve(&self, b: &BackendDescriptor) -> Result<Arc<dyn ModelBackend>, GatewayError> {
        if let Some(found) = self.overrides.lock().get(&b.name) {
            return Ok(found.clone());
        }
        let mut resolved = self.resolved.lock();
        let key = b.fingerprint();
        if let Some(found) = resolved.get(&key) {
            return Ok(found.clone());
        }
        let backend: Arc<dyn ModelBackend> = match &b.kind {
            BackendKind::Scripted { script } => Arc::new(
                ScriptedModel::from_id(script, self.answer_key.clone()).map_err(GatewayError::Config)?,
            ),
            BackendKind::RemoteHttp(cfg) => Arc::new(remote::RemoteBackend::new(cfg.clone(), self.transport.clone())),
        };
        resolved.insert(key, backend.clone());
        Ok(backend)
    }

    fn limiter(&self, b: &BackendDescriptor) -> Arc<Limiter> {
        self.limiters
            .lock()
            .entry(b.name.clone())
            .or_insert_with(|| Arc::new(Limiter::new(b.limits.max_parallel, b.limits.min_interval_ms)))
            .clone()
    }

    fn cache_key(b: &BackendDescriptor, op: &str, payload: Value) -> String {
        let body = json!({"op": op, "backend": b.fingerprint(), "payload": payload});
        hex::encode(Sha256::digest(body.to_string().as_bytes()))
    }

    fn namespace(b: &BackendDescriptor) -> &str {
        b.cache_namespace.as_deref().unwrap_or("default")
    }

    fn cached<T: serde::de::DeserializeOwned>(&self, b: &BackendDescriptor, key: &str) -> Option<T> {
        let value = self.cache.as_ref()?.get(Self::namespace(b), key)?;
        let parsed = serde_json::from_value(value).ok();
        if parsed.is_some() {
            self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
        }
        parsed
    }

    fn store<T: Serialize>(&self, b: &BackendDescriptor, key: &str, value: &T) -> Result<(), GatewayError> {
        if let Some(cache) = &self.cache {
            cache.put(Self::namespace(b), key, &serde_json::to_value(value).expect("cache value serializes"))?;
        }
        Ok(())
    }

    /// Runs `call` under the backend's limiter with bounded retries.
    fn with_retries<T>(
        &self,
        b: &BackendDescriptor,
        mut call: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<(T, u32), GatewayError> {
        let limiter = self.limiter(b);
        let mut log = Vec::new();
        for attempt in 1..=b.retry.max_attempts {
            let result = {
                let _permit = limiter.acquire();
                self.stats.backend_calls.fetch_add(1, Ordering::Relaxed);
                call()
            };
            match result {
                Ok(v) => return Ok((v, attempt)),
                Err(BackendError::Fatal(message)) => {
                    return Err(GatewayError::Fatal { backend: b.name.clone(), message });
                }
                Err(BackendError::Transient(message)) => {
                    log.push(format!("attempt {attempt}: {message}"));
                    if attempt < b.retry.max_attempts && self.sleep {
                        std::thread::sleep(b.retry.delay_after(attempt));
                    }
                }
            }
        }
        Err(GatewayError::Exhausted { backend: b.name.clone(), attempts: log })
    }

    /// Continuation of the dialogue's open prefix, truncated at the first
    /// stop sequence. `sample_index` keeps repeated samples distinct.
    pub fn sample(
        &self,
        d: &Dialogue,
        p: &SamplingParams,
        b: &BackendDescriptor,
        sample_index: u64,
    ) -> Result<Completion, GatewayError> {
        p.validate()?;
        let key = Self::cache_key(b, "sample", json!({"dialogue": d.render(), "params": p, "sample_index": sample_index}));
        if let Some(text) = self.cached::<String>(b, &key) {
            return Ok(Completion { text, attempts: 0, cached: true });
        }
        let backend = self.resolve(b)?;
        let (raw, attempts) = self.with_retries(b, || backend.complete(d, p, sample_index))?;
        let mut text = cut_at_stop(&raw, &p.stop_sequences);
        if backend.whitespace_tokens() {
            text = truncate_whitespace_tokens(text, p.max_tokens as usize);
        }
        let text = text.to_string();
        self.store(b, &key, &text)?;
        Ok(Completion { text, attempts, cached: false })
    }

    /// Next-label distribution renormalized over `labels`. Backends without
    /// token scores are queried by constrained greedy sampling instead; the
    /// distribution then records [`ExtractionMethod::SampledVote`].
    pub fn score_choices(
        &self,
        d: &Dialogue,
        labels: &[String],
        b: &BackendDescriptor,
    ) -> Result<AnswerDistribution, GatewayError> {
        let key = Self::cache_key(b, "score", json!({"dialogue": d.render(), "labels": labels}));
        if let Some(dist) = self.cached::<AnswerDistribution>(b, &key) {
            return Ok(dist);
        }
        let backend = self.resolve(b)?;
        let (scores, _) = self.with_retries(b, || backend.label_scores(d, labels))?;
        let dist = match scores {
            Some(scores) => AnswerDistribution::from_scores(labels, &scores, ExtractionMethod::TokenScores)?,
            None => self.vote(d, labels, b)?,
        };
        self.store(b, &key, &dist)?;
        Ok(dist)
    }

    fn vote(&self, d: &Dialogue, labels: &[String], b: &BackendDescriptor) -> Result<AnswerDistribution, GatewayError> {
        let n = match &b.kind {
            BackendKind::RemoteHttp(cfg) => cfg.vote_samples.max(1),
            BackendKind::Scripted { .. } => 1,
        };
        let params = SamplingParams { stop_sequences: vec![")".into(), HUMAN_STOP.into()], ..SamplingParams::greedy(4) };
        let mut counts = vec![0.0; labels.len()];
        let mut last_raw = String::new();
        for j in 0..n {
            let text = self.sample(d, &params, b, u64::from(j))?.text;
            if let Some(idx) = parse_label(&text, labels) {
                counts[idx] += 1.0;
            }
            last_raw = text;
        }
        if counts.iter().all(|c| *c == 0.0) {
            return Err(GatewayError::NoLabel { raw: last_raw });
        }
        Ok(AnswerDistribution::from_scores(labels, &counts, ExtractionMethod::SampledVote { n })?)
    }

    /// Token count under the backend's tokenizer, falling back to whitespace
    /// units when none is available.
    pub fn count_tokens(&self, text: &str, b: &BackendDescriptor) -> Result<TokenCount, GatewayError> {
        if b.is_scripted() && !self.overrides.lock().contains_key(&b.name) {
            return Ok(TokenCount { count: whitespace_token_count(text), fallback: false });
        }
        let key = Self::cache_key(b, "tokens", json!({"text": text}));
        if let Some(count) = self.cached::<TokenCount>(b, &key) {
            return Ok(count);
        }
        let backend = self.resolve(b)?;
        let (counted, _) = self.with_retries(b, || backend.token_count(text))?;
        let count = match counted {
            Some(count) => TokenCount { count, fallback: false },
            None => TokenCount { count: whitespace_token_count(text), fallback: !backend.whitespace_tokens() },
        };
        self.store(b, &key, &count)?;
        Ok(count)
    }
}

/// First label found at the start of a constrained answer.
pub fn parse_label(text: &str, labels: &[String]) -> Option<usize> {
    let t = text.trim_start().trim_start_matches('(');
    labels.iter().position(|l| {
        t.strip_prefix(l.as_str())
            .is_some_and(|rest| rest.chars().next().is_none_or(|c| !c.is_alphanumeric()))
    })
}
