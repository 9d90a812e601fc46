//! Completion backends.
//!
//! [`CompletionProvider`] is the seam every evaluation runs through. Three
//! implementations ship: [`HttpProvider`] for a completions-style HTTP API,
//! [`MockProvider`] for offline runs, and [`CachedProvider`] which stores
//! temperature-0 results as one JSON file per request digest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::umrf::{to_canonical_string, UmrfGraph, UmrfNode};

pub const DEFAULT_MODEL: &str = "text-davinci-003";
pub const DEFAULT_MAX_TOKENS: u32 = 1024;
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";
/// Default number of requests evaluated in parallel.
pub const DEFAULT_FAN_OUT: usize = 2;
pub const API_KEY_ENV: &str = "UMRF_FORGE_API_KEY";
pub const BASE_URL_ENV: &str = "UMRF_FORGE_BASE_URL";
pub const CACHE_DIR_ENV: &str = "UMRF_FORGE_CACHE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop: Option<Vec<String>>,
    pub model_id: String,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens: DEFAULT_MAX_TOKENS,
            temperature: 0.0,
            stop: None,
            model_id: DEFAULT_MODEL.to_string(),
        }
    }

    pub fn stop_sequences(&self) -> &[String] {
        self.stop.as_deref().unwrap_or(&[])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub finish_reason: FinishReason,
    /// Wall time in seconds, including rate-limit waits and retries.
    pub latency: f64,
    pub from_cache: bool,
    pub retries: u32,
    /// Set whenever `finish_reason` is `length`.
    pub warning: Option<String>,
}

impl CompletionResult {
    pub fn new(text: impl Into<String>, finish_reason: FinishReason) -> Self {
        let warning = (finish_reason == FinishReason::Length)
            .then(|| "completion hit max_tokens and is probably truncated".to_string());
        Self {
            text: text.into(),
            finish_reason,
            latency: 0.0,
            from_cache: false,
            retries: 0,
            warning,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProviderError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("provider unavailable after {attempts} attempt(s): {last}")]
    Unavailable { attempts: u32, last: String },
    #[error("request rejected with HTTP {status}: {body}")]
    Request { status: u16, body: String },
    #[error("malformed provider response: {0}")]
    Decode(String),
}

pub trait CompletionProvider: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, ProviderError>;
}

impl<P: CompletionProvider + ?Sized> CompletionProvider for &P {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, ProviderError> {
        (**self).complete(req)
    }
}

impl<P: CompletionProvider + ?Sized> CompletionProvider for Box<P> {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, ProviderError> {
        (**self).complete(req)
    }
}

impl<P: CompletionProvider + ?Sized> CompletionProvider for Arc<P> {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, ProviderError> {
        (**self).complete(req)
    }
}

/// Adapts a closure into a provider.
pub struct FnProvider<F>(pub F);

impl<F> CompletionProvider for FnProvider<F>
where
    F: Fn(&CompletionRequest) -> Result<CompletionResult, ProviderError> + Send + Sync,
{
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, ProviderError> {
        (self.0)(req)
    }
}

// ---------------------------------------------------------------------------
// Time and rate limiting

pub trait Clock: Send + Sync {
    /// Time elapsed since an arbitrary fixed origin.
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        Self { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Simulated clock: `sleep` advances time instantly.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now: Mutex<Duration>,
}

impl VirtualClock {
    pub fn advance(&self, d: Duration) {
        *self.now.lock().unwrap() += d;
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        *self.now.lock().unwrap()
    }

    fn sleep(&self, d: Duration) {
        self.advance(d);
    }
}

/// Token bucket with a burst of one request. Over any 60 s window at most
/// `requests_per_minute + 1` requests pass.
pub struct TokenBucket {
    per_second: f64,
    clock: Arc<dyn Clock>,
    state: Mutex<(f64, Duration)>,
}

impl TokenBucket {
    pub fn new(requests_per_minute: f64, clock: Arc<dyn Clock>) -> Self {
        let now = clock.now();
        Self {
            per_second: requests_per_minute / 60.0,
            clock,
            state: Mutex::new((1.0, now)),
        }
    }

    /// Blocks until a request may be sent.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut st = self.state.lock().unwrap();
                let now = self.clock.now();
                let elapsed = now.saturating_sub(st.1).as_secs_f64();
                st.0 = (st.0 + elapsed * self.per_second).min(1.0);
                st.1 = now;
                if st.0 >= 1.0 {
                    st.0 -= 1.0;
                    return;
                }
                (1.0 - st.0) / self.per_second
            };
            // Round up so the refill is complete when we wake.
            self.clock.sleep(Duration::from_secs_f64(wait) + Duration::from_nanos(1));
        }
    }
}

// ---------------------------------------------------------------------------
// HTTP

#[derive(Clone)]
pub struct ProviderConfig {
    pub base_url: String,
    pub credential: Option<String>,
    pub requests_per_minute: f64,
    pub max_retries: u32,
    pub backoff_base: Duration,
    pub timeout: Duration,
}

impl std::fmt::Debug for ProviderConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProviderConfig")
            .field("base_url", &self.base_url)
            .field("credential", &self.credential.as_ref().map(|_| "<redacted>"))
            .field("requests_per_minute", &self.requests_per_minute)
            .field("max_retries", &self.max_retries)
            .field("backoff_base", &self.backoff_base)
            .finish()
    }
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            base_url: DEFAULT_BASE_URL.to_string(),
            credential: None,
            requests_per_minute: 20.0,
            max_retries: 5,
            backoff_base: Duration::from_secs(1),
            timeout: Duration::from_secs(300),
        }
    }
}

impl ProviderConfig {
    /// Defaults with the credential and optional base URL taken from the environment.
    pub fn from_env() -> Self {
        let mut cfg = Self {
            credential: std::env::var(API_KEY_ENV).ok().filter(|s| !s.is_empty()),
            ..Self::default()
        };
        if let Ok(url) = std::env::var(BASE_URL_ENV) {
            if !url.is_empty() {
                cfg.base_url = url;
            }
        }
        cfg
    }

    fn check(&self) -> Result<&str, ProviderError> {
        if !(self.requests_per_minute > 0.0 && self.requests_per_minute.is_finite()) {
            return Err(ProviderError::Config("requests_per_minute must be positive".into()));
        }
        self.credential
            .as_deref()
            .ok_or_else(|| ProviderError::Config(format!("missing credential; set {API_KEY_ENV}")))
    }
}

/// JSON-over-HTTP transport shared by completion and embedding clients:
/// bearer auth, a token bucket, and exponential backoff on 429/5xx.
pub struct HttpTransport {
    cfg: ProviderConfig,
    client: reqwest::blocking::Client,
    bucket: TokenBucket,
    clock: Arc<dyn Clock>,
}

pub struct HttpResponse {
    pub body: Value,
    pub retries: u32,
    pub latency: Duration,
}

impl HttpTransport {
    pub fn new(cfg: ProviderConfig) -> Result<Self, ProviderError> {
        Self::with_clock(cfg, Arc::new(SystemClock::default()))
    }

    pub fn with_clock(cfg: ProviderConfig, clock: Arc<dyn Clock>) -> Result<Self, ProviderError> {
        cfg.check()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| ProviderError::Config(e.to_string()))?;
        Ok(Self {
            bucket: TokenBucket::new(cfg.requests_per_minute, clock.clone()),
            cfg,
            client,
            clock,
        })
    }

    pub fn post_json(&self, path: &str, body: &Value) -> Result<HttpResponse, ProviderError> {
        let key = self.cfg.check()?;
        let url = format!("{}/{}", self.cfg.base_url.trim_end_matches('/'), path.trim_start_matches('/'));
        let started = self.clock.now();
        let mut retries = 0u32;
        loop {
            self.bucket.acquire();
            let last = match self.client.post(&url).bearer_auth(key).json(body).send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let body: Value = resp.json().map_err(|e| ProviderError::Decode(e.to_string()))?;
                        return Ok(HttpResponse {
                            body,
                            retries,
                            latency: self.clock.now().saturating_sub(started),
                        });
                    }
                    let text = resp.text().unwrap_or_default();
                    if status.as_u16() != 429 && !status.is_server_error() {
                        return Err(ProviderError::Request {
                            status: status.as_u16(),
                            body: excerpt(&text, 200),
                        });
                    }
                    format!("HTTP {}: {}", status.as_u16(), excerpt(&text, 200))
                }
                Err(e) => format!("transport error: {e}"),
            };
            if retries >= self.cfg.max_retries {
                return Err(ProviderError::Unavailable {
                    attempts: retries + 1,
                    last,
                });
            }
            let backoff = self.cfg.backoff_base.mul_f64(2f64.powi(retries as i32));
            log::warn!("{url}: {last}; retrying in {backoff:?}");
            self.clock.sleep(backoff);
            retries += 1;
        }
    }
}

fn excerpt(s: &str, max_chars: usize) -> String {
    match s.char_indices().nth(max_chars) {
        Some((i, _)) => format!("{}…", &s[..i]),
        None => s.to_string(),
    }
}

/// `POST {base_url}/completions` client.
pub struct HttpProvider {
    transport: HttpTransport,
}

impl HttpProvider {
    pub fn new(cfg: ProviderConfig) -> Result<Self, ProviderError> {
        Ok(Self {
            transport: HttpTransport::new(cfg)?,
        })
    }

    pub fn with_clock(cfg: ProviderConfig, clock: Arc<dyn Clock>) -> Result<Self, ProviderError> {
        Ok(Self {
            transport: HttpTransport::with_clock(cfg, clock)?,
        })
    }
}

impl CompletionProvider for HttpProvider {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, ProviderError> {
        if req.max_tokens == 0 {
            return Err(ProviderError::Config("max_tokens must be at least 1".into()));
        }
        let body = json!({
            "model": req.model_id,
            "prompt": req.prompt,
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
            "stop": req.stop,
        });
        let resp = self.transport.post_json("completions", &body)?;
        let choice = resp
            .body
            .get("choices")
            .and_then(|c| c.get(0))
            .ok_or_else(|| ProviderError::Decode("response has no choices".into()))?;
        let text = choice
            .get("text")
            .and_then(Value::as_str)
            .ok_or_else(|| ProviderError::Decode("choice has no text".into()))?;
        let finish = match choice.get("finish_reason").and_then(Value::as_str) {
            Some("length") => FinishReason::Length,
            Some("stop") | None => FinishReason::Stop,
            Some(_) => FinishReason::Error,
        };
        let mut result = CompletionResult::new(text, finish);
        result.retries = resp.retries;
        result.latency = resp.latency.as_secs_f64();
        if let Some(w) = &result.warning {
            log::warn!("{w}");
        }
        Ok(result)
    }
}

// ---------------------------------------------------------------------------
// Cache

/// SHA-256 over `(model_id, max_tokens, temperature, stop, prompt)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn for_request(req: &CompletionRequest) -> Self {
        let material = json!([req.model_id, req.max_tokens, req.temperature, req.stop, req.prompt]);
        let digest = Sha256::digest(material.to_string().as_bytes());
        Self(hex::encode(digest))
    }

    pub fn digest(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    request: CompletionRequest,
    text: String,
    finish_reason: FinishReason,
}

/// Persists temperature-0 completions under `dir`, one `<digest>.json` per request.
pub struct CachedProvider<P> {
    inner: P,
    dir: PathBuf,
}

impl<P: CompletionProvider> CachedProvider<P> {
    pub fn new(inner: P, dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { inner, dir })
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    pub fn entry_path(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{}.json", key.digest()))
    }

    fn lookup(&self, key: &CacheKey, req: &CompletionRequest) -> Option<CacheEntry> {
        let path = self.entry_path(key);
        let bytes = fs::read(&path).ok()?;
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) if entry.key == key.digest() && &entry.request == req => Some(entry),
            Ok(_) => {
                log::warn!("cache entry {} does not match its request; replacing", path.display());
                None
            }
            Err(e) => {
                log::warn!("corrupt cache entry {}: {e}; replacing", path.display());
                None
            }
        }
    }

    fn store(&self, key: &CacheKey, req: &CompletionRequest, result: &CompletionResult) -> std::io::Result<()> {
        let entry = CacheEntry {
            key: key.digest().to_string(),
            request: req.clone(),
            text: result.text.clone(),
            finish_reason: result.finish_reason,
        };
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir)?;
        serde_json::to_writer_pretty(&mut tmp, &entry)?;
        tmp.flush()?;
        tmp.persist(self.entry_path(key)).map_err(|e| e.error)?;
        Ok(())
    }
}

impl<P: CompletionProvider> CompletionProvider for CachedProvider<P> {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, ProviderError> {
        if req.temperature != 0.0 {
            return self.inner.complete(req);
        }
        let started = Instant::now();
        let key = CacheKey::for_request(req);
        if let Some(entry) = self.lookup(&key, req) {
            let mut r = CompletionResult::new(entry.text, entry.finish_reason);
            r.from_cache = true;
            r.latency = started.elapsed().as_secs_f64();
            return Ok(r);
        }
        let result = self.inner.complete(req)?;
        if result.finish_reason != FinishReason::Error {
            if let Err(e) = self.store(&key, req, &result) {
                log::warn!("could not write cache entry: {e}");
            }
        }
        Ok(result)
    }
}

pub fn cached_complete<P: CompletionProvider>(
    req: &CompletionRequest,
    provider: P,
    cache_dir: &Path,
) -> Result<CompletionResult, ProviderError> {
    let cached = CachedProvider::new(provider, cache_dir).map_err(|e| ProviderError::Config(e.to_string()))?;
    cached.complete(req)
}

// ---------------------------------------------------------------------------
// Mock

/// Graph returned by the mock when no fixture matches: a single `scan` action.
pub fn fallback_graph() -> UmrfGraph {
    UmrfGraph::new("scan").with_node(UmrfNode::new("scan", 0))
}

pub fn fallback_completion() -> String {
    to_canonical_string(&fallback_graph())
}

/// The last blank-line-separated block of a prompt with a trailing cue line removed.
pub fn final_query_block(prompt: &str) -> &str {
    let trimmed = prompt.trim_end();
    let block = match trimmed.rfind("\n\n") {
        Some(i) => &trimmed[i + 2..],
        None => trimmed,
    };
    let block = block.trim();
    match block.rsplit_once('\n') {
        Some((head, last)) if last.trim() == crate::prompt::CUE => head.trim(),
        None if block == crate::prompt::CUE => "",
        _ => block,
    }
}

/// Returns the fixture completion whose key is the longest suffix of the
/// prompt's final query block, or [`fallback_completion`].
pub fn mock_complete(req: &CompletionRequest, fixture: &BTreeMap<String, String>) -> CompletionResult {
    let query = final_query_block(&req.prompt);
    let best = fixture
        .iter()
        .filter(|(k, _)| {
            let k = k.trim();
            !k.is_empty() && query.ends_with(k)
        })
        .max_by_key(|(k, _)| k.trim().len());
    let text = best.map(|(_, v)| v.clone()).unwrap_or_else(fallback_completion);
    CompletionResult::new(text, FinishReason::Stop)
}

#[derive(Debug, Default)]
pub struct MockProvider {
    fixture: BTreeMap<String, String>,
    calls: AtomicUsize,
}

impl MockProvider {
    pub fn new(fixture: BTreeMap<String, String>) -> Self {
        Self {
            fixture,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn fixture(&self) -> &BTreeMap<String, String> {
        &self.fixture
    }
}

impl CompletionProvider for MockProvider {
    fn complete(&self, req: &CompletionRequest) -> Result<CompletionResult, ProviderError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(mock_complete(req, &self.fixture))
    }
}
