//! Entity representations: a pluggable [`Encoder`], a content-addressed
//! vector cache, and the similarity math used for selection.
//!
//! Every vector leaving [`Embedder::embed_batch`] is L2-normalized, so
//! Euclidean K-Means over them agrees with cosine decoding.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::exec::Execution;
use crate::llm::RetryPolicy;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("encoder transport failure: {0}")]
    Transport(String),
    #[error("encoder {encoder} returned {got} values, expected {expected}")]
    DimensionMismatch { encoder: String, expected: usize, got: usize },
    #[error("encoder returned {got} vectors for {expected} inputs")]
    CountMismatch { expected: usize, got: usize },
    #[error("malformed encoder response: {0}")]
    Malformed(String),
    #[error("zero vector")]
    ZeroVector,
    #[error("non-finite component in vector")]
    NonFinite,
    #[error("vectors of different length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("cannot embed an empty surface")]
    EmptySurface,
    #[error("corrupt cache entry {path}: {reason}")]
    CorruptCache { path: PathBuf, reason: String },
    #[error("cache i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl EmbedError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, EmbedError::Transport(_))
    }
}

pub type Result<T> = std::result::Result<T, EmbedError>;

/// Maps strings to fixed-width vectors. `id` takes part in cache keys, so
/// two encoders with different behaviour must not share an id.
pub trait Encoder: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    /// Raw (not necessarily normalized) vectors, one per input, in order.
    fn encode(&self, surfaces: &[String]) -> Result<Vec<Vec<f64>>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedEntity {
    pub surface: String,
    pub vector: Arc<[f64]>,
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn squared_distance(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Cosine similarity. Zero vectors are an error, never a silent 0.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(EmbedError::LengthMismatch(u.len(), v.len()));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(EmbedError::NonFinite);
    }
    let n = norm(v);
    if n == 0.0 {
        return Err(EmbedError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

const TRIGRAM_START: char = '\u{2}';
const TRIGRAM_END: char = '\u{3}';
const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Deterministic offline encoder.
///
/// The string is wrapped as `U+0002 + s + U+0003`; every window of three
/// consecutive chars is UTF-8 encoded, hashed with 64-bit FNV-1a and counted
/// in bucket `hash % dim`. The count vector is then L2-normalized.
#[derive(Debug, Clone)]
pub struct HashedTrigramEncoder {
    id: String,
    dim: usize,
}

impl HashedTrigramEncoder {
    pub const DEFAULT_DIM: usize = 64;

    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "encoder dimension must be positive");
        Self { id: format!("hashed-trigram-{dim}"), dim }
    }

    pub fn fnv1a(bytes: &[u8]) -> u64 {
        bytes.iter().fold(FNV_OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(FNV_PRIME))
    }

    fn encode_one(&self, surface: &str) -> Result<Vec<f64>> {
        if surface.is_empty() {
            return Err(EmbedError::EmptySurface);
        }
        let chars: Vec<char> = std::iter::once(TRIGRAM_START)
            .chain(surface.chars())
            .chain(std::iter::once(TRIGRAM_END))
            .collect();
        let mut counts = vec![0.0; self.dim];
        let mut buf = String::with_capacity(12);
        for w in chars.windows(3) {
            buf.clear();
            buf.extend(w);
            counts[(Self::fnv1a(buf.as_bytes()) % self.dim as u64) as usize] += 1.0;
        }
        l2_normalize(&counts)
    }
}

impl Default for HashedTrigramEncoder {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIM)
    }
}

/// Convenience constructor mirroring the other encoders.
pub fn test_encoder(dim: usize) -> HashedTrigramEncoder {
    HashedTrigramEncoder::new(dim)
}

impl Encoder for HashedTrigramEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, surfaces: &[String]) -> Result<Vec<Vec<f64>>> {
        surfaces.iter().map(|s| self.encode_one(s)).collect()
    }
}

/// Remote embeddings endpoint: `POST {model, input}` returning
/// `{data: [{index, embedding}]}`.
#[derive(Debug, Clone)]
pub struct HttpEncoder {
    id: String,
    url: String,
    model: String,
    token: Option<String>,
    dim: usize,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    index: usize,
    embedding: Vec<f64>,
}

impl HttpEncoder {
    pub fn new(url: impl Into<String>, model: impl Into<String>, token: Option<String>, dim: usize) -> Self {
        let model = model.into();
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(120)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            id: format!("http:{model}"),
            url: url.into(),
            model,
            token,
            dim,
            retry: RetryPolicy::default(),
            agent,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn request(&self, surfaces: &[String]) -> Result<Vec<Vec<f64>>> {
        let body = serde_json::json!({ "model": self.model, "input": surfaces });
        let mut req = self.agent.post(&self.url);
        if let Some(token) = &self.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(&body)
            .map_err(|e| EmbedError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(EmbedError::Transport(format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err(EmbedError::Malformed(format!("HTTP {status}")));
        }
        let parsed: EmbeddingResponse = resp
            .body_mut()
            .read_json()
            .map_err(|e| EmbedError::Malformed(e.to_string()))?;
        decode_embedding_items(parsed.data, surfaces.len(), self.dim, &self.id)
    }
}

fn decode_embedding_items(
    mut items: Vec<EmbeddingItem>,
    expected: usize,
    dim: usize,
    encoder: &str,
) -> Result<Vec<Vec<f64>>> {
    if items.len() != expected {
        return Err(EmbedError::CountMismatch { expected, got: items.len() });
    }
    items.sort_by_key(|i| i.index);
    for (pos, item) in items.iter().enumerate() {
        if item.index != pos {
            return Err(EmbedError::Malformed(format!("missing index {pos}")));
        }
        if item.embedding.len() != dim {
            return Err(EmbedError::DimensionMismatch {
                encoder: encoder.to_string(),
                expected: dim,
                got: item.embedding.len(),
            });
        }
    }
    Ok(items.into_iter().map(|i| i.embedding).collect())
}

impl Encoder for HttpEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, surfaces: &[String]) -> Result<Vec<Vec<f64>>> {
        self.retry.run(|| self.request(surfaces), EmbedError::is_retryable)
    }
}

/// On-disk vector store, one file per `(encoder id, surface)` key.
///
/// File layout: a single JSON header line
/// `{"encoder_id":..,"dim":..,"surface_hash":..}` followed by `dim`
/// little-endian `f64` values. Files are written to a temporary name and
/// renamed into place; entries are never evicted.
#[derive(Debug, Clone)]
pub struct EmbeddingCache {
    dir: PathBuf,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct CacheHeader {
    encoder_id: String,
    dim: usize,
    surface_hash: String,
}

fn sha256_hex(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for (i, p) in parts.iter().enumerate() {
        if i > 0 {
            h.update([0u8]);
        }
        h.update(p);
    }
    hex::encode(h.finalize())
}

impl EmbeddingCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(encoder_id: &str, surface: &str) -> String {
        sha256_hex(&[encoder_id.as_bytes(), surface.as_bytes()])
    }

    fn path(&self, encoder_id: &str, surface: &str) -> PathBuf {
        self.dir.join(format!("{}.vec", Self::key(encoder_id, surface)))
    }

    pub fn get(&self, encoder_id: &str, dim: usize, surface: &str) -> Result<Option<Vec<f64>>> {
        let path = self.path(encoder_id, surface);
        let mut bytes = Vec::new();
        match fs::File::open(&path) {
            Ok(mut f) => f.read_to_end(&mut bytes)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let corrupt = |reason: &str| EmbedError::CorruptCache { path: path.clone(), reason: reason.to_string() };
        let nl = bytes.iter().position(|b| *b == b'\n').ok_or_else(|| corrupt("no header"))?;
        let header: CacheHeader =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| corrupt(&e.to_string()))?;
        let expected = CacheHeader {
            encoder_id: encoder_id.to_string(),
            dim,
            surface_hash: sha256_hex(&[surface.as_bytes()]),
        };
        if header != expected {
            return Err(corrupt("header does not match key"));
        }
        let body = &bytes[nl + 1..];
        if body.len() != dim * 8 {
            return Err(corrupt("payload length"));
        }
        Ok(Some(
            body.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        ))
    }

    pub fn put(&self, encoder_id: &str, surface: &str, vector: &[f64]) -> Result<()> {
        let header = CacheHeader {
            encoder_id: encoder_id.to_string(),
            dim: vector.len(),
            surface_hash: sha256_hex(&[surface.as_bytes()]),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        serde_json::to_writer(&mut tmp, &header).map_err(std::io::Error::from)?;
        tmp.write_all(b"\n")?;
        for x in vector {
            tmp.write_all(&x.to_le_bytes())?;
        }
        tmp.flush()?;
        tmp.persist(self.path(encoder_id, surface)).map_err(|e| e.error)?;
        Ok(())
    }
}

/// Caching front end over an [`Encoder`].
pub struct Embedder {
    encoder: Arc<dyn Encoder>,
    disk: Option<EmbeddingCache>,
    memory: RwLock<HashMap<String, Arc<[f64]>>>,
    batch_size: usize,
    concurrency: usize,
    exec: Execution,
}

impl Embedder {
    pub fn new(encoder: Arc<dyn Encoder>) -> Self {
        Self {
            encoder,
            disk: None,
            memory: RwLock::new(HashMap::new()),
            batch_size: 64,
            concurrency: 4,
            exec: Execution::default(),
        }
    }

    pub fn with_disk_cache(mut self, cache: EmbeddingCache) -> Self {
        self.disk = Some(cache);
        self
    }

    pub fn with_batch_size(mut self, n: usize) -> Self {
        self.batch_size = n.max(1);
        self
    }

    pub fn with_concurrency(mut self, n: usize) -> Self {
        self.concurrency = n.max(1);
        self
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn encoder_id(&self) -> &str {
        self.encoder.id()
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    /// Number of surfaces held in the in-memory cache.
    pub fn cached_len(&self) -> usize {
        self.memory.read().expect("embedding cache poisoned").len()
    }

    fn lookup(&self, surface: &str) -> Result<Option<Arc<[f64]>>> {
        if let Some(v) = self.memory.read().expect("embedding cache poisoned").get(surface) {
            return Ok(Some(v.clone()));
        }
        if let Some(disk) = &self.disk {
            if let Some(v) = disk.get(self.encoder.id(), self.encoder.dim(), surface)? {
                let v: Arc<[f64]> = v.into();
                self.memory
                    .write()
                    .expect("embedding cache poisoned")
                    .insert(surface.to_string(), v.clone());
                return Ok(Some(v));
            }
        }
        Ok(None)
    }

    /// Embed `surfaces`, one normalized vector per input in input order.
    pub fn embed_batch(&self, surfaces: &[String]) -> Result<Vec<EmbeddedEntity>> {
        if surfaces.iter().any(|s| s.is_empty()) {
            return Err(EmbedError::EmptySurface);
        }
        let mut misses: Vec<String> = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for s in surfaces {
            if self.lookup(s)?.is_none() && seen.insert(s.as_str()) {
                misses.push(s.clone());
            }
        }
        if !misses.is_empty() {
            let chunks: Vec<&[String]> = misses.chunks(self.batch_size).collect();
            let encoded = self
                .exec
                .map_bounded(&chunks, self.concurrency, |chunk| self.encode_chunk(chunk));
            for (chunk, vectors) in chunks.iter().zip(encoded) {
                for (surface, vector) in chunk.iter().zip(vectors?) {
                    if let Some(disk) = &self.disk {
                        disk.put(self.encoder.id(), surface, &vector)?;
                    }
                    self.memory
                        .write()
                        .expect("embedding cache poisoned")
                        .insert(surface.clone(), vector.into());
                }
            }
        }
        let memory = self.memory.read().expect("embedding cache poisoned");
        Ok(surfaces
            .iter()
            .map(|s| EmbeddedEntity { surface: s.clone(), vector: memory[s].clone() })
            .collect())
    }

    fn encode_chunk(&self, chunk: &[String]) -> Result<Vec<Vec<f64>>> {
        let raw = self.encoder.encode(chunk)?;
        if raw.len() != chunk.len() {
            return Err(EmbedError::CountMismatch { expected: chunk.len(), got: raw.len() });
        }
        raw.iter()
            .map(|v| {
                if v.len() != self.encoder.dim() {
                    return Err(EmbedError::DimensionMismatch {
                        encoder: self.encoder.id().to_string(),
                        expected: self.encoder.dim(),
                        got: v.len(),
                    });
                }
                l2_normalize(v)
            })
            .collect()
    }
}
