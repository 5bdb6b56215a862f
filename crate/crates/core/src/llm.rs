//! Chat-completion clients with a content-addressed response cache.
//!
//! Every backend call goes through [`LlmClient::complete`], which consults the
//! on-disk cache before touching the backend and writes the answer back before
//! returning. A warm cache therefore replays a whole experiment offline.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{DialoguePoint, LabelCatalog};
use crate::stages;

pub const LLM_API_KEY_ENV: &str = "LLM_API_KEY";
pub const LLM_API_BASE_ENV: &str = "LLM_API_BASE";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{message}")]
pub struct BackendError {
    pub message: String,
    pub status: Option<u16>,
    /// Whether a retry may succeed (network failures, 429, 5xx).
    pub transient: bool,
}

impl BackendError {
    pub fn transient(message: impl Into<String>) -> Self {
        Self { message: message.into(), status: None, transient: true }
    }

    pub fn fatal(message: impl Into<String>) -> Self {
        Self { message: message.into(), status: None, transient: false }
    }

    pub fn from_status(status: u16, body: &str) -> Self {
        let transient = status == 429 || status >= 500;
        Self { message: format!("HTTP {status}: {}", truncate(body, 300)), status: Some(status), transient }
    }
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("backend {backend} failed after {attempts} attempt(s): {last}")]
    Exhausted { backend: String, attempts: u32, last: BackendError },
    #[error("corrupt cache entry {path}: {reason}")]
    CacheCorrupt { path: PathBuf, reason: String },
    #[error("cache I/O error at {path}: {source}")]
    CacheIo {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid script: {0}")]
    Script(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub system: String,
    pub user: String,
    pub max_tokens: u32,
    pub temperature: f64,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.user.is_empty() {
            return Err(LlmError::InvalidRequest("user prompt is empty".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(LlmError::InvalidRequest(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        Ok(())
    }

    fn canonical(&self) -> Value {
        json!({
            "kind": "chat",
            "model": self.model,
            "system": self.system,
            "user": self.user,
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub backend_id: String,
    pub cached: bool,
    pub latency_ms: u64,
}

/// SHA-256 digest of a canonical request, hex-encoded.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey(String);

impl CacheKey {
    /// Keys any JSON value. `serde_json` keeps object keys sorted, so equal
    /// values always hash identically.
    pub fn of_value(value: &Value) -> Self {
        let bytes = serde_json::to_vec(value).expect("JSON values always serialize");
        Self(hex::encode(Sha256::digest(bytes)))
    }

    pub fn for_chat(req: &ChatRequest) -> Self {
        Self::of_value(&req.canonical())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub request: Value,
    pub response: Value,
    pub timestamp: u64,
}

/// Directory of `<digest>.json` files, one per request.
#[derive(Debug, Clone)]
pub struct ContentCache {
    dir: PathBuf,
}

impl ContentCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, LlmError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| LlmError::CacheIo { path: dir.clone(), source })?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{}.json", key.as_str()))
    }

    /// Returns the stored response for `request`, if any.
    pub fn get(&self, key: &CacheKey, request: &Value) -> Result<Option<Value>, LlmError> {
        let path = self.path_for(key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(source) => return Err(LlmError::CacheIo { path, source }),
        };
        let entry: CacheEntry = serde_json::from_slice(&bytes)
            .map_err(|e| LlmError::CacheCorrupt { path: path.clone(), reason: e.to_string() })?;
        if entry.key != key.as_str() {
            return Err(LlmError::CacheCorrupt { path, reason: format!("entry claims key {}", entry.key) });
        }
        if &entry.request != request {
            return Err(LlmError::CacheCorrupt { path, reason: "stored request differs from lookup request".into() });
        }
        Ok(Some(entry.response))
    }

    /// Writes through a temporary file and renames it into place.
    pub fn put(&self, key: &CacheKey, request: Value, response: Value) -> Result<(), LlmError> {
        let path = self.path_for(key);
        let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let entry = CacheEntry { key: key.as_str().to_string(), request, response, timestamp };
        let bytes = serde_json::to_vec_pretty(&entry).expect("cache entries always serialize");
        let io_err = |source| LlmError::CacheIo { path: path.clone(), source };
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(io_err)?;
        tmp.write_all(&bytes).map_err(io_err)?;
        tmp.persist(&path).map_err(|e| io_err(e.error))?;
        Ok(())
    }
}

/// Exponential backoff: attempt `n` (0-based) waits `base * 2^n`, capped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 4, base_delay_ms: 500, max_delay_ms: 8_000 }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        Self { max_attempts, base_delay_ms: 0, max_delay_ms: 0 }
    }

    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt).unwrap_or(u64::MAX);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }

    pub fn run<T>(&self, backend: &str, mut op: impl FnMut() -> Result<T, BackendError>) -> Result<T, LlmError> {
        let max = self.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(err) => {
                    attempt += 1;
                    if !err.transient || attempt >= max {
                        return Err(LlmError::Exhausted { backend: backend.to_string(), attempts: attempt, last: err });
                    }
                    log::warn!("{backend}: attempt {attempt}/{max} failed ({err}); retrying");
                    std::thread::sleep(self.delay(attempt - 1));
                }
            }
        }
    }
}

/// Counting semaphore capping concurrent backend calls.
#[derive(Debug)]
pub(crate) struct InFlight {
    cap: usize,
    used: Mutex<usize>,
    freed: Condvar,
}

pub(crate) struct InFlightGuard<'a>(&'a InFlight);

impl InFlight {
    pub(crate) fn new(cap: usize) -> Self {
        Self { cap: cap.max(1), used: Mutex::new(0), freed: Condvar::new() }
    }

    pub(crate) fn acquire(&self) -> InFlightGuard<'_> {
        let mut used = self.used.lock().unwrap_or_else(|e| e.into_inner());
        while *used >= self.cap {
            used = self.freed.wait(used).unwrap_or_else(|e| e.into_inner());
        }
        *used += 1;
        InFlightGuard(self)
    }
}

impl Drop for InFlightGuard<'_> {
    fn drop(&mut self) {
        let mut used = self.0.used.lock().unwrap_or_else(|e| e.into_inner());
        *used -= 1;
        self.0.freed.notify_one();
    }
}

pub trait ChatBackend: Send + Sync {
    fn id(&self) -> &str;
    fn send(&self, req: &ChatRequest) -> Result<String, BackendError>;
}

/// A backend plus cache, retry policy and in-flight cap.
pub struct LlmClient {
    backend: Arc<dyn ChatBackend>,
    cache: Option<ContentCache>,
    retry: RetryPolicy,
    in_flight: InFlight,
}

impl LlmClient {
    pub fn new(backend: Arc<dyn ChatBackend>) -> Self {
        Self { backend, cache: None, retry: RetryPolicy::default(), in_flight: InFlight::new(8) }
    }

    pub fn with_cache(mut self, cache: ContentCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, cap: usize) -> Self {
        self.in_flight = InFlight::new(cap);
        self
    }

    pub fn backend_id(&self) -> &str {
        self.backend.id()
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, LlmError> {
        req.validate()?;
        let key = CacheKey::for_chat(req);
        let canonical = req.canonical();
        if let Some(cache) = &self.cache {
            if let Some(stored) = cache.get(&key, &canonical)? {
                let text = stored.get("text").and_then(Value::as_str).ok_or_else(|| LlmError::CacheCorrupt {
                    path: cache.path_for(&key),
                    reason: "missing response text".into(),
                })?;
                let backend_id = stored.get("backend_id").and_then(Value::as_str).unwrap_or(self.backend.id());
                return Ok(ChatResponse {
                    text: text.to_string(),
                    backend_id: backend_id.to_string(),
                    cached: true,
                    latency_ms: 0,
                });
            }
        }
        let started = Instant::now();
        let text = {
            let _slot = self.in_flight.acquire();
            self.retry.run(self.backend.id(), || self.backend.send(req))?
        };
        if text.is_empty() {
            log::warn!("{}: backend returned an empty completion", self.backend.id());
        }
        if let Some(cache) = &self.cache {
            cache.put(&key, canonical, json!({"text": text, "backend_id": self.backend.id()}))?;
        }
        Ok(ChatResponse {
            text,
            backend_id: self.backend.id().to_string(),
            cached: false,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

/// OpenAI-style chat endpoint: `POST {base}/chat/completions`.
pub struct RemoteChatBackend {
    id: String,
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl RemoteChatBackend {
    pub fn new(
        id: impl Into<String>,
        base_url: &str,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::Config(format!("http client: {e}")))?;
        Ok(Self {
            id: id.into(),
            endpoint: format!("{}/chat/completions", base_url.trim_end_matches('/')),
            api_key,
            client,
        })
    }

    /// Reads `LLM_API_BASE` (unless `base_url` is given) and `LLM_API_KEY`.
    pub fn from_env(id: impl Into<String>, base_url: Option<&str>, timeout: Duration) -> Result<Self, LlmError> {
        let base = match base_url {
            Some(b) => b.to_string(),
            None => std::env::var(LLM_API_BASE_ENV)
                .map_err(|_| LlmError::Config(format!("{LLM_API_BASE_ENV} is not set and no base_url configured")))?,
        };
        Self::new(id, &base, std::env::var(LLM_API_KEY_ENV).ok(), timeout)
    }

    pub fn request_body(req: &ChatRequest) -> Value {
        let mut messages = Vec::new();
        if !req.system.is_empty() {
            messages.push(json!({"role": "system", "content": req.system}));
        }
        messages.push(json!({"role": "user", "content": req.user}));
        json!({
            "model": req.model,
            "messages": messages,
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
        })
    }

    pub fn extract_text(body: &Value) -> Result<String, BackendError> {
        let content = body.pointer("/choices/0/message/content").ok_or_else(|| {
            BackendError::fatal(format!(
                "response has no choices[0].message.content: {}",
                truncate(&body.to_string(), 300)
            ))
        })?;
        match content {
            Value::String(s) => Ok(s.clone()),
            Value::Null => Ok(String::new()),
            other => Err(BackendError::fatal(format!("unexpected content type: {other}"))),
        }
    }
}

impl ChatBackend for RemoteChatBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let mut builder = self.client.post(&self.endpoint).json(&Self::request_body(req));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp =
            builder.send().map_err(|e| BackendError::transient(format!("request to {} failed: {e}", self.endpoint)))?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| BackendError::transient(format!("reading response body: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::from_status(status, &body));
        }
        let value: Value =
            serde_json::from_str(&body).map_err(|e| BackendError::fatal(format!("invalid JSON response: {e}")))?;
        Self::extract_text(&value)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    /// The whole user prompt equals the string.
    Exact(String),
    /// The user prompt contains the string.
    Contains(String),
}

impl Matcher {
    fn matches(&self, prompt: &str) -> bool {
        match self {
            Matcher::Exact(s) => prompt == s,
            Matcher::Contains(s) => prompt.contains(s.as_str()),
        }
    }

    fn pattern(&self) -> &str {
        match self {
            Matcher::Exact(s) | Matcher::Contains(s) => s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(rename = "match")]
    pub matcher: Matcher,
    pub response: String,
}

/// Deterministic backend answering from a fixed rule table.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    id: String,
    rules: Vec<ScriptRule>,
    default: Option<String>,
}

impl ScriptedBackend {
    /// Rejects rule sets where one prompt could satisfy two rules: repeated
    /// patterns, nested `contains` patterns, or an exact string containing a
    /// `contains` pattern.
    pub fn new(id: impl Into<String>, rules: Vec<ScriptRule>, default: Option<String>) -> Result<Self, LlmError> {
        for (i, a) in rules.iter().enumerate() {
            if a.matcher.pattern().is_empty() {
                return Err(LlmError::Script(format!("rule {i} has an empty pattern")));
            }
            for (j, b) in rules.iter().enumerate().skip(i + 1) {
                let overlap = match (&a.matcher, &b.matcher) {
                    (Matcher::Exact(x), Matcher::Exact(y)) => x == y,
                    (Matcher::Contains(x), Matcher::Contains(y)) => x.contains(y.as_str()) || y.contains(x.as_str()),
                    (Matcher::Exact(x), Matcher::Contains(y)) | (Matcher::Contains(y), Matcher::Exact(x)) => {
                        x.contains(y.as_str())
                    }
                };
                if overlap {
                    return Err(LlmError::Script(format!(
                        "rules {i} ({:?}) and {j} ({:?}) can match the same prompt",
                        a.matcher, b.matcher
                    )));
                }
            }
        }
        Ok(Self { id: id.into(), rules, default })
    }
}

impl ChatBackend for ScriptedBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, req: &ChatRequest) -> Result<String, BackendError> {
        if let Some(rule) = self.rules.iter().find(|r| r.matcher.matches(&req.user)) {
            return Ok(rule.response.clone());
        }
        self.default.clone().ok_or_else(|| BackendError::fatal(format!("{}: no script entry matches prompt", self.id)))
    }
}

/// Test double that answers from ground truth.
///
/// Generation prompts get the point's true label text, rerank prompts the
/// identity permutation, and zero-shot prompts the true label's number.
pub struct OracleBackend {
    id: String,
    truth: HashMap<String, (usize, String)>,
}

impl OracleBackend {
    pub fn new(id: impl Into<String>, points: &[DialoguePoint], catalog: &LabelCatalog) -> Self {
        let truth = points
            .iter()
            .filter_map(|p| {
                let text = catalog.text(p.misconception_id)?;
                Some((stages::serialize_point(p), (p.misconception_id, text.to_string())))
            })
            .collect();
        Self { id: id.into(), truth }
    }

    fn lookup(&self, prompt: &str) -> Result<&(usize, String), BackendError> {
        let conversation = stages::extract_section(prompt, stages::CONVERSATION_TAG)
            .ok_or_else(|| BackendError::fatal("oracle: prompt has no conversation section"))?;
        self.truth.get(conversation).ok_or_else(|| BackendError::fatal("oracle: conversation is not in the corpus"))
    }
}

impl ChatBackend for OracleBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn send(&self, req: &ChatRequest) -> Result<String, BackendError> {
        let prompt = req.user.as_str();
        if let Some(candidates) = stages::extract_section(prompt, stages::CANDIDATES_TAG) {
            let k = candidates.lines().filter(|l| !l.trim().is_empty()).count();
            return Ok((1..=k).map(|i| i.to_string()).collect::<Vec<_>>().join(","));
        }
        if stages::extract_section(prompt, stages::CATALOG_TAG).is_some() {
            let (label_id, _) = self.lookup(prompt)?;
            return Ok((label_id + 1).to_string());
        }
        let (_, text) = self.lookup(prompt)?;
        Ok(text.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicU32, Ordering};

    fn req(user: &str) -> ChatRequest {
        ChatRequest { model: "m".into(), system: "s".into(), user: user.into(), max_tokens: 32, temperature: 0.0 }
    }

    struct Counting {
        calls: AtomicU32,
        fail_first: u32,
        transient: bool,
    }

    impl ChatBackend for Counting {
        fn id(&self) -> &str {
            "counting"
        }

        fn send(&self, req: &ChatRequest) -> Result<String, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                return Err(BackendError {
                    message: format!("fail {n}"),
                    status: Some(503),
                    transient: self.transient,
                });
            }
            Ok(format!("echo: {}", req.user))
        }
    }

    fn counting(fail_first: u32, transient: bool) -> Arc<Counting> {
        Arc::new(Counting { calls: AtomicU32::new(0), fail_first, transient })
    }

    #[test]
    fn second_identical_request_hits_cache() {
        let dir = tempfile::tempdir().unwrap();
        let backend = counting(0, true);
        let client = LlmClient::new(backend.clone()).with_cache(ContentCache::open(dir.path()).unwrap());
        let first = client.complete(&req("hello")).unwrap();
        let second = client.complete(&req("hello")).unwrap();
        assert!(!first.cached);
        assert!(second.cached);
        assert_eq!(first.text, second.text);
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn cache_keys_distinguish_every_field() {
        let base = req("u");
        let variants = [
            ChatRequest { model: "other".into(), ..base.clone() },
            ChatRequest { system: "other".into(), ..base.clone() },
            ChatRequest { user: "other".into(), ..base.clone() },
            ChatRequest { max_tokens: 33, ..base.clone() },
            ChatRequest { temperature: 0.5, ..base.clone() },
        ];
        let mut keys: Vec<_> = variants.iter().map(CacheKey::for_chat).collect();
        keys.push(CacheKey::for_chat(&base));
        let n = keys.len();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), n);
        assert_eq!(CacheKey::for_chat(&base), CacheKey::for_chat(&base.clone()));
    }

    #[test]
    fn retries_transient_failures() {
        let backend = counting(2, true);
        let client = LlmClient::new(backend.clone()).with_retry(RetryPolicy::no_delay(3));
        assert_eq!(client.complete(&req("x")).unwrap().text, "echo: x");
        assert_eq!(backend.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn exhausted_retries_report_last_status() {
        let backend = counting(10, true);
        let client = LlmClient::new(backend.clone()).with_retry(RetryPolicy::no_delay(3));
        match client.complete(&req("x")) {
            Err(LlmError::Exhausted { attempts, last, .. }) => {
                assert_eq!(attempts, 3);
                assert_eq!(last.status, Some(503));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fatal_errors_are_not_retried() {
        let backend = counting(10, false);
        let client = LlmClient::new(backend.clone()).with_retry(RetryPolicy::no_delay(5));
        assert!(client.complete(&req("x")).is_err());
        assert_eq!(backend.calls.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy { max_attempts: 5, base_delay_ms: 100, max_delay_ms: 350 };
        assert_eq!(p.delay(0), Duration::from_millis(100));
        assert_eq!(p.delay(1), Duration::from_millis(200));
        assert_eq!(p.delay(2), Duration::from_millis(350));
        assert_eq!(p.delay(70), Duration::from_millis(350));
    }

    #[test]
    fn corrupt_cache_entry_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ContentCache::open(dir.path()).unwrap();
        let r = req("y");
        let key = CacheKey::for_chat(&r);
        fs::write(cache.path_for(&key), b"{not json").unwrap();
        let client = LlmClient::new(counting(0, true)).with_cache(cache.clone());
        match client.complete(&r) {
            Err(LlmError::CacheCorrupt { path, .. }) => assert_eq!(path, cache.path_for(&key)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_requests_rejected() {
        let client = LlmClient::new(counting(0, true));
        assert!(matches!(client.complete(&req("")), Err(LlmError::InvalidRequest(_))));
        let hot = ChatRequest { temperature: -1.0, ..req("x") };
        assert!(matches!(client.complete(&hot), Err(LlmError::InvalidRequest(_))));
    }

    #[test]
    fn scripted_rules() {
        let backend = ScriptedBackend::new(
            "s",
            vec![
                ScriptRule { matcher: Matcher::Contains("Rerank these".into()), response: "2,1".into() },
                ScriptRule { matcher: Matcher::Exact("ping".into()), response: "pong".into() },
            ],
            None,
        )
        .unwrap();
        assert_eq!(backend.send(&req("please Rerank these now")).unwrap(), "2,1");
        assert_eq!(backend.send(&req("ping")).unwrap(), "pong");
        assert!(backend.send(&req("unmatched")).is_err());

        let with_default = ScriptedBackend::new("s", vec![], Some("fallback".into())).unwrap();
        assert_eq!(with_default.send(&req("anything")).unwrap(), "fallback");
    }

    #[test]
    fn overlapping_rules_rejected() {
        let rule = |m: Matcher| ScriptRule { matcher: m, response: "r".into() };
        let nested = vec![rule(Matcher::Contains("Rerank".into())), rule(Matcher::Contains("Rerank these".into()))];
        assert!(ScriptedBackend::new("s", nested, None).is_err());
        let exact_dupe = vec![rule(Matcher::Exact("a".into())), rule(Matcher::Exact("a".into()))];
        assert!(ScriptedBackend::new("s", exact_dupe, None).is_err());
        let mixed = vec![rule(Matcher::Exact("say hi".into())), rule(Matcher::Contains("hi".into()))];
        assert!(ScriptedBackend::new("s", mixed, None).is_err());
        let fine = vec![rule(Matcher::Exact("a".into())), rule(Matcher::Contains("b".into()))];
        assert!(ScriptedBackend::new("s", fine, None).is_ok());
    }

    #[test]
    fn remote_body_shape() {
        let body = RemoteChatBackend::request_body(&req("hi"));
        assert_eq!(
            body,
            json!({"model": "m", "messages": [{"role": "system", "content": "s"}, {"role": "user", "content": "hi"}],
                   "max_tokens": 32, "temperature": 0.0})
        );
        let answer = json!({"choices": [{"message": {"role": "assistant", "content": "label"}}]});
        assert_eq!(RemoteChatBackend::extract_text(&answer).unwrap(), "label");
        assert!(RemoteChatBackend::extract_text(&json!({"choices": []})).is_err());
    }

    #[test]
    fn status_classification() {
        assert!(BackendError::from_status(429, "").transient);
        assert!(BackendError::from_status(502, "").transient);
        assert!(!BackendError::from_status(401, "").transient);
    }
}
