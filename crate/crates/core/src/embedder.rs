//! Embedding vectors, cosine similarity and the embedding backends.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::llm::{BackendError, CacheKey, ContentCache, InFlight, LlmError, RetryPolicy};

pub const EMBED_API_KEY_ENV: &str = "EMBED_API_KEY";
pub const EMBED_API_BASE_ENV: &str = "EMBED_API_BASE";

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("vector has zero norm; cosine similarity is undefined")]
    ZeroNorm,
    #[error("vector contains a non-finite value at position {0}")]
    NonFinite(usize),
    #[error("vector is empty")]
    EmptyVector,
    #[error("text #{index} is empty or has no tokens")]
    EmptyText { index: usize },
    #[error("invalid embedder configuration: {0}")]
    Config(String),
    #[error("backend returned {got} vectors for {expected} texts")]
    CountMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Remote(#[from] LlmError),
}

/// Dense real vector produced by an embedder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, EmbedError> {
        if values.is_empty() {
            return Err(EmbedError::EmptyVector);
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn dot(&self, other: &Self) -> Result<f64, EmbedError> {
        if self.dim() != other.dim() {
            return Err(EmbedError::DimensionMismatch { left: self.dim(), right: other.dim() });
        }
        Ok(self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn normalized(&self) -> Result<Self, EmbedError> {
        let n = self.norm();
        if n == 0.0 {
            return Err(EmbedError::ZeroNorm);
        }
        Ok(Self(self.0.iter().map(|v| v / n).collect()))
    }

    pub fn scaled(&self, factor: f64) -> Result<Self, EmbedError> {
        Self::new(self.0.iter().map(|v| v * factor).collect())
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = EmbedError;

    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

/// `a·b / (‖a‖‖b‖)`, clamped to `[-1, 1]`. Zero-norm inputs are an error.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    let dot = a.dot(b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroNorm);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Lowercased maximal runs of alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

pub const DEFAULT_HASH_DIM: usize = 256;
pub const DEFAULT_HASH_NGRAM: usize = 2;

/// Feature-hashed bag of token n-grams (all orders `1..=ngram`), L2-normalized.
pub fn hash_embed(text: &str, dim: usize, ngram: usize) -> Result<EmbeddingVector, EmbedError> {
    if dim < 8 {
        return Err(EmbedError::Config(format!("hash dim must be at least 8, got {dim}")));
    }
    if ngram == 0 {
        return Err(EmbedError::Config("ngram must be at least 1".into()));
    }
    let tokens = tokenize(text);
    if tokens.is_empty() {
        return Err(EmbedError::EmptyText { index: 0 });
    }
    let mut counts = vec![0.0; dim];
    for n in 1..=ngram.min(tokens.len()) {
        for window in tokens.windows(n) {
            let gram = window.join(" ");
            counts[(fnv1a(gram.as_bytes()) % dim as u64) as usize] += 1.0;
        }
    }
    EmbeddingVector::new(counts)?.normalized()
}

/// Selects and parameterizes an embedding backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "snake_case")]
pub enum EmbedderSpec {
    RemoteApi {
        model: String,
        #[serde(default = "default_remote_dim")]
        dim: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        base_url: Option<String>,
        #[serde(default = "default_batch_size")]
        batch_size: usize,
        #[serde(default = "default_in_flight")]
        max_in_flight: usize,
    },
    HashLocal {
        #[serde(default = "default_hash_dim")]
        dim: usize,
        #[serde(default = "default_hash_ngram")]
        ngram: usize,
    },
    /// TF-IDF vectors over a vocabulary fitted on the label catalog; the
    /// dimension is the vocabulary size.
    Tfidf,
}

fn default_remote_dim() -> usize {
    384
}
fn default_batch_size() -> usize {
    64
}
fn default_in_flight() -> usize {
    4
}
fn default_hash_dim() -> usize {
    DEFAULT_HASH_DIM
}
fn default_hash_ngram() -> usize {
    DEFAULT_HASH_NGRAM
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec::HashLocal { dim: DEFAULT_HASH_DIM, ngram: DEFAULT_HASH_NGRAM }
    }
}

impl EmbedderSpec {
    pub fn minilm() -> Self {
        EmbedderSpec::RemoteApi {
            model: "sentence-transformers/all-MiniLM-L6-v2".into(),
            dim: default_remote_dim(),
            base_url: None,
            batch_size: default_batch_size(),
            max_in_flight: default_in_flight(),
        }
    }
}

pub trait Embedder: Send + Sync {
    fn dim(&self) -> usize;

    /// Stable identifier of the embedder and its parameters; indexes built
    /// with one fingerprint refuse queries from another.
    fn fingerprint(&self) -> String;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError>;

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut out = self.embed_batch(&[text])?;
        out.pop().ok_or(EmbedError::CountMismatch { expected: 1, got: 0 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedder {
    dim: usize,
    ngram: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize, ngram: usize) -> Result<Self, EmbedError> {
        if dim < 8 || ngram == 0 {
            return Err(EmbedError::Config(format!("hash embedder needs dim >= 8 and ngram >= 1, got {dim}/{ngram}")));
        }
        Ok(Self { dim, ngram })
    }
}

impl Embedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        format!("hash_local:fnv1a:dim={}:ngram={}", self.dim, self.ngram)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        texts
            .iter()
            .enumerate()
            .map(|(index, t)| {
                hash_embed(t, self.dim, self.ngram).map_err(|e| match e {
                    EmbedError::EmptyText { .. } => EmbedError::EmptyText { index },
                    other => other,
                })
            })
            .collect()
    }
}

/// HTTP embedding backend: `POST {base}/embeddings` with `{model, input}`,
/// answered by `{vectors}`. Each text is cached under its own key.
pub struct RemoteEmbedder {
    model: String,
    dim: usize,
    endpoint: String,
    api_key: Option<String>,
    batch_size: usize,
    in_flight: InFlight,
    max_in_flight: usize,
    retry: RetryPolicy,
    cache: Option<ContentCache>,
    client: reqwest::blocking::Client,
}

impl RemoteEmbedder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: impl Into<String>,
        dim: usize,
        base_url: &str,
        api_key: Option<String>,
        batch_size: usize,
        max_in_flight: usize,
        timeout: Duration,
    ) -> Result<Self, EmbedError> {
        if dim == 0 || batch_size == 0 {
            return Err(EmbedError::Config("remote embedder needs dim > 0 and batch_size > 0".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| EmbedError::Config(format!("http client: {e}")))?;
        Ok(Self {
            model: model.into(),
            dim,
            endpoint: format!("{}/embeddings", base_url.trim_end_matches('/')),
            api_key,
            batch_size,
            in_flight: InFlight::new(max_in_flight),
            max_in_flight: max_in_flight.max(1),
            retry: RetryPolicy::default(),
            cache: None,
            client,
        })
    }

    pub fn with_cache(mut self, cache: ContentCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn cache_request(&self, text: &str) -> Value {
        json!({"kind": "embedding", "model": self.model, "dim": self.dim, "text": text})
    }

    fn fetch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, EmbedError> {
        let _slot = self.in_flight.acquire();
        let body = json!({"model": self.model, "input": texts});
        let vectors = self.retry.run(&self.fingerprint(), || {
            let mut builder = self.client.post(&self.endpoint).json(&body);
            if let Some(key) = &self.api_key {
                builder = builder.bearer_auth(key);
            }
            let resp = builder
                .send()
                .map_err(|e| BackendError::transient(format!("request to {} failed: {e}", self.endpoint)))?;
            let status = resp.status().as_u16();
            let text = resp.text().map_err(|e| BackendError::transient(format!("reading body: {e}")))?;
            if !(200..300).contains(&status) {
                return Err(BackendError::from_status(status, &text));
            }
            #[derive(Deserialize)]
            struct Reply {
                vectors: Vec<Vec<f64>>,
            }
            serde_json::from_str::<Reply>(&text)
                .map(|r| r.vectors)
                .map_err(|e| BackendError::fatal(format!("invalid embedding response: {e}")))
        })?;
        if vectors.len() != texts.len() {
            return Err(EmbedError::CountMismatch { expected: texts.len(), got: vectors.len() });
        }
        Ok(vectors)
    }
}

impl Embedder for RemoteEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn fingerprint(&self) -> String {
        format!("remote_api:{}:dim={}", self.model, self.dim)
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if let Some(index) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(EmbedError::EmptyText { index });
        }
        let mut out: Vec<Option<Vec<f64>>> = vec![None; texts.len()];
        let mut missing = Vec::new();
        for (i, text) in texts.iter().enumerate() {
            if let Some(cache) = &self.cache {
                let request = self.cache_request(text);
                if let Some(stored) = cache.get(&CacheKey::of_value(&request), &request)? {
                    let values: Vec<f64> = serde_json::from_value(stored).map_err(|e| LlmError::CacheCorrupt {
                        path: cache.path_for(&CacheKey::of_value(&request)),
                        reason: e.to_string(),
                    })?;
                    out[i] = Some(values);
                    continue;
                }
            }
            missing.push(i);
        }

        let batches: Vec<&[usize]> = missing.chunks(self.batch_size).collect();
        let results: Vec<Result<Vec<Vec<f64>>, EmbedError>> = std::thread::scope(|scope| {
            let mut results = Vec::with_capacity(batches.len());
            for wave in batches.chunks(self.max_in_flight) {
                let handles: Vec<_> = wave
                    .iter()
                    .map(|batch| {
                        let batch_texts: Vec<&str> = batch.iter().map(|&i| texts[i]).collect();
                        scope.spawn(move || self.fetch(&batch_texts))
                    })
                    .collect();
                for h in handles {
                    results
                        .push(h.join().unwrap_or_else(|_| Err(EmbedError::Config("embedding worker panicked".into()))));
                }
            }
            results
        });
        for (batch, result) in batches.iter().zip(results) {
            for (&i, values) in batch.iter().zip(result?) {
                if values.len() != self.dim {
                    return Err(EmbedError::DimensionMismatch { left: self.dim, right: values.len() });
                }
                if let Some(cache) = &self.cache {
                    let request = self.cache_request(texts[i]);
                    cache.put(&CacheKey::of_value(&request), request, json!(values))?;
                }
                out[i] = Some(values);
            }
        }
        out.into_iter().map(|v| EmbeddingVector::new(v.expect("every text is either cached or fetched"))).collect()
    }
}
