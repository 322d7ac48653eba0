//! Chat-completion access under greedy decoding.
//!
//! [`CompletionClient`] wraps any [`ChatBackend`] (HTTP endpoint or test
//! double) with retries and a response cache keyed by `(model, prompt)`.

use std::collections::{HashMap, VecDeque};
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{Dataset, GoldMention, Schema, Sentence};
use crate::prompt::{query_text, serialize_output};

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum LlmError {
    #[error("transient endpoint failure: {0}")]
    Transient(String),
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("endpoint returned HTTP {0}")]
    Http(u16),
    #[error("malformed endpoint response: {0}")]
    Malformed(String),
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("oracle has no sentence matching input {0:?}")]
    Unmatched(String),
    #[error("scripted backend has no responses left")]
    ScriptExhausted,
    #[error("response cache: {0}")]
    Cache(String),
}

impl LlmError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, LlmError::Transient(_))
    }
}

/// Exponential backoff: attempt `n` (1-based) waits
/// `min(base * factor^(n-1), max_delay)` before attempt `n + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
            factor: 2.0,
            max_delay: Duration::from_secs(10),
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(attempts: u32) -> Self {
        Self { attempts, base_delay: Duration::ZERO, ..Self::default() }
    }

    pub fn delay(&self, attempt: u32) -> Duration {
        let scaled = self.base_delay.as_secs_f64() * self.factor.powi(attempt.saturating_sub(1) as i32);
        Duration::from_secs_f64(scaled.min(self.max_delay.as_secs_f64()))
    }

    /// Call `f` until it succeeds, fails with a non-retryable error, or
    /// the attempt budget is spent. Returns the last error in the latter
    /// two cases.
    pub fn run<T, E>(&self, mut f: impl FnMut() -> Result<T, E>, retryable: impl Fn(&E) -> bool) -> Result<T, E> {
        let attempts = self.attempts.max(1);
        let mut attempt = 1;
        loop {
            match f() {
                Ok(v) => return Ok(v),
                Err(e) if attempt < attempts && retryable(&e) => {
                    tracing::debug!("attempt {attempt} failed, retrying");
                    std::thread::sleep(self.delay(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 512;

/// A greedy completion request. Temperature is not configurable.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model: String,
    pub prompt: String,
    pub max_output_tokens: u32,
}

impl CompletionRequest {
    pub fn new(model: impl Into<String>, prompt: impl Into<String>) -> Self {
        Self { model: model.into(), prompt: prompt.into(), max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS }
    }

    pub fn temperature(&self) -> f64 {
        0.0
    }

    pub fn cache_key(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.model.as_bytes());
        h.update([0u8]);
        h.update(self.prompt.as_bytes());
        hex::encode(h.finalize())
    }

    /// Chat-completions request body.
    pub fn to_wire(&self) -> serde_json::Value {
        serde_json::json!({
            "model": self.model,
            "messages": [{ "role": "user", "content": self.prompt }],
            "temperature": self.temperature(),
            "max_tokens": self.max_output_tokens,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletionResult {
    /// Raw model output, untrimmed.
    pub text: String,
    pub latency: Duration,
    pub cached: bool,
}

/// Something that answers a completion request. Real endpoints and test
/// doubles implement the same trait.
pub trait ChatBackend: Send + Sync {
    fn call(&self, request: &CompletionRequest) -> Result<String, LlmError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn call(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        (**self).call(request)
    }
}

/// Extract the first choice's message content from a chat-completions
/// response body.
pub fn parse_chat_response(body: &serde_json::Value) -> Result<String, LlmError> {
    body.pointer("/choices/0/message/content")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .ok_or_else(|| LlmError::Malformed("missing choices[0].message.content".into()))
}

/// HTTP chat-completions endpoint.
#[derive(Debug, Clone)]
pub struct HttpChatBackend {
    url: String,
    token: Option<String>,
    agent: ureq::Agent,
}

impl HttpChatBackend {
    pub fn new(url: impl Into<String>, token: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(300)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { url: url.into(), token, agent }
    }
}

impl ChatBackend for HttpChatBackend {
    fn call(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let mut req = self.agent.post(&self.url);
        if let Some(token) = &self.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(request.to_wire())
            .map_err(|e| LlmError::Transient(e.to_string()))?;
        match resp.status().as_u16() {
            200..=299 => {}
            401 | 403 => return Err(LlmError::Auth(format!("HTTP {}", resp.status()))),
            s @ (408 | 429 | 500..=599) => return Err(LlmError::Transient(format!("HTTP {s}"))),
            s => return Err(LlmError::Http(s)),
        }
        let body: serde_json::Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| LlmError::Malformed(e.to_string()))?;
        parse_chat_response(&body)
    }
}

#[derive(Serialize, Deserialize)]
struct CachedResponse {
    model: String,
    key: String,
    text: String,
}

/// Append-only response cache. Entries are written once (write-then-rename)
/// and never replaced.
#[derive(Default)]
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<String, String>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| LlmError::Cache(e.to_string()))?;
        Ok(Self { dir: Some(dir), memory: RwLock::default() })
    }

    fn get(&self, key: &str) -> Result<Option<String>, LlmError> {
        if let Some(text) = self.memory.read().expect("response cache poisoned").get(key) {
            return Ok(Some(text.clone()));
        }
        let Some(dir) = &self.dir else { return Ok(None) };
        let path = dir.join(format!("{key}.json"));
        match fs::read(&path) {
            Ok(bytes) => {
                let entry: CachedResponse =
                    serde_json::from_slice(&bytes).map_err(|e| LlmError::Cache(format!("{}: {e}", path.display())))?;
                self.memory
                    .write()
                    .expect("response cache poisoned")
                    .insert(key.to_string(), entry.text.clone());
                Ok(Some(entry.text))
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(LlmError::Cache(e.to_string())),
        }
    }

    fn put(&self, key: &str, model: &str, text: &str) -> Result<(), LlmError> {
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{key}.json"));
            if !path.exists() {
                let entry = CachedResponse { model: model.into(), key: key.into(), text: text.into() };
                let io = |e: std::io::Error| LlmError::Cache(e.to_string());
                let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
                serde_json::to_writer(&mut tmp, &entry).map_err(|e| LlmError::Cache(e.to_string()))?;
                tmp.flush().map_err(io)?;
                tmp.persist(&path).map_err(|e| io(e.error))?;
            }
        }
        self.memory
            .write()
            .expect("response cache poisoned")
            .insert(key.to_string(), text.to_string());
        Ok(())
    }
}

/// Retrying, caching front end over a [`ChatBackend`].
pub struct CompletionClient {
    backend: Box<dyn ChatBackend>,
    cache: ResponseCache,
    retry: RetryPolicy,
    inflight: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    backend_calls: AtomicUsize,
}

impl CompletionClient {
    pub fn new(backend: impl ChatBackend + 'static) -> Self {
        Self {
            backend: Box::new(backend),
            cache: ResponseCache::in_memory(),
            retry: RetryPolicy::default(),
            inflight: Mutex::default(),
            backend_calls: AtomicUsize::new(0),
        }
    }

    pub fn with_cache(mut self, cache: ResponseCache) -> Self {
        self.cache = cache;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// How many times the backend has been invoked, retries included.
    pub fn backend_calls(&self) -> usize {
        self.backend_calls.load(Ordering::SeqCst)
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, LlmError> {
        if request.prompt.is_empty() {
            return Err(LlmError::EmptyPrompt);
        }
        let started = Instant::now();
        let key = request.cache_key();
        if let Some(text) = self.cache.get(&key)? {
            return Ok(CompletionResult { text, latency: started.elapsed(), cached: true });
        }
        // one in-flight call per key; later callers wait and hit the cache
        let slot = self
            .inflight
            .lock()
            .expect("inflight map poisoned")
            .entry(key.clone())
            .or_default()
            .clone();
        let _guard = slot.lock().expect("inflight slot poisoned");
        if let Some(text) = self.cache.get(&key)? {
            return Ok(CompletionResult { text, latency: started.elapsed(), cached: true });
        }
        let mut attempts = 0;
        let text = self
            .retry
            .run(
                || {
                    attempts += 1;
                    self.backend_calls.fetch_add(1, Ordering::SeqCst);
                    self.backend.call(request)
                },
                LlmError::is_retryable,
            )
            .map_err(|e| {
                if e.is_retryable() {
                    LlmError::Exhausted { attempts, last: e.to_string() }
                } else {
                    e
                }
            })?;
        self.cache.put(&key, &request.model, &text)?;
        Ok(CompletionResult { text, latency: started.elapsed(), cached: false })
    }
}

/// Rule used by [`CorruptorOracle`] to degrade gold outputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropRule {
    /// Remove every mention whose surface has an odd number of chars.
    DropOddLength,
    /// Append `"~"` to every surface with an odd number of chars, turning
    /// each into one false positive plus one false negative.
    MangleOddLength,
}

impl DropRule {
    pub fn apply(self, gold: &[GoldMention]) -> Vec<GoldMention> {
        let odd = |m: &GoldMention| m.surface.trim().chars().count() % 2 == 1;
        match self {
            DropRule::DropOddLength => gold.iter().filter(|m| !odd(m)).cloned().collect(),
            DropRule::MangleOddLength => gold
                .iter()
                .map(|m| {
                    if odd(m) {
                        GoldMention::new(m.etype.clone(), format!("{}~", m.surface.trim()))
                    } else {
                        m.clone()
                    }
                })
                .collect(),
        }
    }
}

/// Answers each prompt with a fixed output looked up by the query sentence.
#[derive(Debug, Clone, Default)]
pub struct LookupOracle {
    answers: HashMap<String, String>,
}

impl LookupOracle {
    fn build<'a>(
        sentences: impl IntoIterator<Item = &'a Sentence>,
        schema: &Schema,
        transform: impl Fn(&[GoldMention]) -> Vec<GoldMention>,
    ) -> Self {
        let mut answers = HashMap::new();
        for s in sentences {
            answers
                .entry(s.text.clone())
                .or_insert_with(|| serialize_output(&transform(&s.gold), schema));
        }
        Self { answers }
    }
}

impl ChatBackend for LookupOracle {
    fn call(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let query = query_text(&request.prompt).ok_or_else(|| LlmError::Unmatched(String::new()))?;
        self.answers
            .get(query)
            .cloned()
            .ok_or_else(|| LlmError::Unmatched(query.chars().take(80).collect()))
    }
}

/// Test double that returns the canonical gold JSON of the query sentence.
/// Sentences are matched by exact text; the first sentence wins on
/// duplicate texts.
pub type GoldOracle = LookupOracle;
/// Gold oracle with a [`DropRule`] applied to every answer.
pub type CorruptorOracle = LookupOracle;

pub fn gold_oracle(dataset: &Dataset) -> GoldOracle {
    LookupOracle::build(&dataset.test, &dataset.schema, |g| g.to_vec())
}

pub fn corruptor_oracle(dataset: &Dataset, rule: DropRule) -> CorruptorOracle {
    LookupOracle::build(&dataset.test, &dataset.schema, |g| rule.apply(g))
}

/// Replays a queue of canned responses in order.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    queue: Mutex<VecDeque<Result<String, LlmError>>>,
}

impl ScriptedBackend {
    pub fn new(responses: impl IntoIterator<Item = Result<String, LlmError>>) -> Self {
        Self { queue: Mutex::new(responses.into_iter().collect()) }
    }

    pub fn remaining(&self) -> usize {
        self.queue.lock().expect("script poisoned").len()
    }
}

impl ChatBackend for ScriptedBackend {
    fn call(&self, _request: &CompletionRequest) -> Result<String, LlmError> {
        self.queue
            .lock()
            .expect("script poisoned")
            .pop_front()
            .unwrap_or(Err(LlmError::ScriptExhausted))
    }
}
