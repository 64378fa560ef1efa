//! Client for the external generator service that writes strategies,
//! rationales and policy samples.
//!
//! The gateway wraps a [`Transport`] with a content-addressed response cache,
//! retry with exponential backoff, and a bound on in-flight requests. Two
//! transports ship here: [`HttpTransport`] for a chat-completions endpoint and
//! [`MockTransport`] for fully scripted, deterministic runs.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const DEFAULT_MAX_TOKENS: u32 = 2048;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("bad response: {0}")]
    BadResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("configuration: {0}")]
    Config(String),
}

/// What a generation call is for. Decides default sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Purpose {
    Strategy,
    Rationale,
    Judge,
    Policy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub temperature: f64,
    pub max_tokens: u32,
}

impl SamplingParams {
    /// Judging is greedy; everything else samples at temperature 1.
    pub fn for_purpose(purpose: Purpose) -> Self {
        let temperature = match purpose {
            Purpose::Judge => 0.0,
            _ => 1.0,
        };
        SamplingParams {
            temperature,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub params: SamplingParams,
    pub purpose: Purpose,
    /// Distinguishes repeated samples of the same prompt; part of the cache key.
    #[serde(default)]
    pub variant: u32,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>, purpose: Purpose) -> Self {
        GenerationRequest {
            prompt: prompt.into(),
            params: SamplingParams::for_purpose(purpose),
            purpose,
            variant: 0,
        }
    }

    pub fn with_variant(mut self, variant: u32) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_params(mut self, params: SamplingParams) -> Self {
        self.params = params;
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransportMeta {
    pub cached: bool,
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub completion: String,
    pub usage: Usage,
    pub meta: TransportMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportReply {
    pub completion: String,
    #[serde(default)]
    pub usage: Usage,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Worth retrying: timeouts, connection resets, 429 and 5xx.
    Transient(String),
    /// Not worth retrying: protocol errors, 4xx, unscripted mock prompts.
    Fatal(String),
}

pub trait Transport: Send + Sync {
    fn send(&self, req: &GenerationRequest) -> Result<TransportReply, TransportError>;
}

/// Hex SHA-256 of a prompt, the key used by scripted mocks.
pub fn prompt_hash(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// One scripted response. Every `contains` needle must occur in the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub purpose: Option<Purpose>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<u32>,
    #[serde(default)]
    pub contains: Vec<String>,
    pub response: String,
}

impl MockRule {
    fn matches(&self, req: &GenerationRequest) -> bool {
        self.purpose.is_none_or(|p| p == req.purpose)
            && self.variant.is_none_or(|v| v == req.variant)
            && self.contains.iter().all(|n| req.prompt.contains(n.as_str()))
    }
}

/// Scripted responses: exact prompt hashes first, then rules in order, then the fallback.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub by_hash: BTreeMap<String, String>,
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub fallback: Option<String>,
}

impl MockScript {
    pub fn from_path(path: &Path) -> Result<Self, GatewayError> {
        let text = fs::read_to_string(path)
            .map_err(|e| GatewayError::Config(format!("reading mock script {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| GatewayError::Config(format!("mock script {}: {e}", path.display())))
    }

    pub fn respond(&self, req: &GenerationRequest) -> Option<&str> {
        if let Some(r) = self.by_hash.get(&prompt_hash(&req.prompt)) {
            return Some(r);
        }
        self.rules
            .iter()
            .find(|r| r.matches(req))
            .map(|r| r.response.as_str())
            .or(self.fallback.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct MockTransport {
    script: MockScript,
    calls: AtomicUsize,
}

impl MockTransport {
    pub fn new(script: MockScript) -> Self {
        MockTransport {
            script,
            calls: AtomicUsize::new(0),
        }
    }

    /// Number of requests that reached the transport (cache hits excluded).
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Transport for MockTransport {
    fn send(&self, req: &GenerationRequest) -> Result<TransportReply, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        match self.script.respond(req) {
            Some(text) => Ok(TransportReply {
                completion: text.to_string(),
                usage: Usage {
                    prompt_tokens: req.prompt.split_whitespace().count() as u64,
                    completion_tokens: text.split_whitespace().count() as u64,
                },
            }),
            None => Err(TransportError::Fatal(format!(
                "mock has no response for prompt {}",
                prompt_hash(&req.prompt)
            ))),
        }
    }
}

/// Chat-completions JSON over HTTP.
pub struct HttpTransport {
    url: String,
    key: Option<String>,
    model: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(url: impl Into<String>, key: Option<String>, model: impl Into<String>, timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        HttpTransport {
            url: url.into(),
            key,
            model: model.into(),
            agent,
        }
    }

    /// Request body sent for `req`.
    pub fn request_body(&self, req: &GenerationRequest) -> Value {
        json!({
            "model": self.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.params.temperature,
            "max_tokens": req.params.max_tokens,
        })
    }
}

/// Extracts the first choice's content and the usage block from a response body.
pub fn parse_chat_response(body: &Value) -> Result<TransportReply, TransportError> {
    let content = body
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| TransportError::Fatal(format!("response without choices[0].message.content: {body}")))?;
    let usage = Usage {
        prompt_tokens: body.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        completion_tokens: body
            .pointer("/usage/completion_tokens")
            .and_then(Value::as_u64)
            .unwrap_or(0),
    };
    Ok(TransportReply {
        completion: content.to_string(),
        usage,
    })
}

impl Transport for HttpTransport {
    fn send(&self, req: &GenerationRequest) -> Result<TransportReply, TransportError> {
        let mut call = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call
            .send_json(self.request_body(req))
            .map_err(|e| TransportError::Transient(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err(TransportError::Transient(format!("HTTP {status}")));
        }
        if status >= 400 {
            return Err(TransportError::Fatal(format!("HTTP {status}")));
        }
        let body: Value = resp
            .body_mut()
            .read_json()
            .map_err(|e| TransportError::Fatal(format!("undecodable body: {e}")))?;
        parse_chat_response(&body)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base_delay_ms: 500,
            max_delay_ms: 8_000,
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_retries: u32) -> Self {
        RetryPolicy {
            max_retries,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }

    pub fn delay(&self, retry: u32) -> Duration {
        let ms = self
            .base_delay_ms
            .saturating_mul(1u64 << retry.min(20))
            .min(self.max_delay_ms);
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CacheEntry {
    completion: String,
    usage: Usage,
}

/// Content-addressed response cache, in memory and optionally on disk.
///
/// The first stored value for a key wins; later writes for the same key are
/// ignored so a key never maps to two completions within one epoch.
pub struct ResponseCache {
    dir: Option<PathBuf>,
    epoch: String,
    mem: Mutex<HashMap<String, CacheEntry>>,
}

impl ResponseCache {
    pub fn new(dir: Option<PathBuf>, epoch: impl Into<String>) -> Result<Self, GatewayError> {
        if let Some(d) = &dir {
            fs::create_dir_all(d).map_err(|e| GatewayError::Config(format!("cache dir {}: {e}", d.display())))?;
        }
        Ok(ResponseCache {
            dir,
            epoch: epoch.into(),
            mem: Mutex::new(HashMap::new()),
        })
    }

    pub fn key(&self, req: &GenerationRequest) -> String {
        let material = json!({
            "epoch": self.epoch,
            "max_tokens": req.params.max_tokens,
            "prompt": req.prompt,
            "temperature": req.params.temperature,
            "variant": req.variant,
        });
        hex::encode(Sha256::digest(material.to_string().as_bytes()))
    }

    fn path(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    fn get(&self, key: &str) -> Option<CacheEntry> {
        if let Some(e) = self.mem.lock().unwrap().get(key) {
            return Some(e.clone());
        }
        let text = fs::read_to_string(self.path(key)?).ok()?;
        let entry: CacheEntry = serde_json::from_str(&text).ok()?;
        self.mem
            .lock()
            .unwrap()
            .entry(key.to_string())
            .or_insert(entry.clone());
        Some(entry)
    }

    fn put(&self, key: &str, entry: CacheEntry) -> CacheEntry {
        let mut mem = self.mem.lock().unwrap();
        if let Some(existing) = mem.get(key) {
            return existing.clone();
        }
        if let Some(path) = self.path(key) {
            if !path.exists() {
                let tmp = path.with_extension(format!("tmp{}", std::process::id()));
                let body = serde_json::to_string(&entry).expect("cache entry serializes");
                if fs::write(&tmp, body).and_then(|_| fs::rename(&tmp, &path)).is_err() {
                    log::warn!("could not persist cache entry {key}");
                }
            }
        }
        mem.insert(key.to_string(), entry.clone());
        entry
    }
}

struct InflightLimiter {
    in_use: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

struct Permit<'a>(&'a InflightLimiter);

impl InflightLimiter {
    fn new(max: usize) -> Self {
        InflightLimiter {
            in_use: Mutex::new(0),
            freed: Condvar::new(),
            max: max.max(1),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.in_use.lock().unwrap();
        while *n >= self.max {
            n = self.freed.wait(n).unwrap();
        }
        *n += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.in_use.lock().unwrap() -= 1;
        self.0.freed.notify_one();
    }
}

/// Settings for building a gateway; every field can come from a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    pub url: Option<String>,
    #[serde(skip_serializing)]
    pub key: Option<String>,
    pub model: String,
    pub cache_dir: Option<PathBuf>,
    pub retry: RetryPolicy,
    pub max_in_flight: usize,
    pub timeout_secs: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            url: None,
            key: None,
            model: "deepseek-r1".into(),
            cache_dir: None,
            retry: RetryPolicy::default(),
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            timeout_secs: 120,
        }
    }
}

impl GatewayConfig {
    /// Fills unset fields from `GATEWAY_URL`, `GATEWAY_KEY` and `GATEWAY_CACHE_DIR`.
    pub fn with_env(mut self) -> Self {
        if self.url.is_none() {
            self.url = std::env::var("GATEWAY_URL").ok().filter(|s| !s.is_empty());
        }
        if self.key.is_none() {
            self.key = std::env::var("GATEWAY_KEY").ok().filter(|s| !s.is_empty());
        }
        if self.cache_dir.is_none() {
            self.cache_dir = std::env::var_os("GATEWAY_CACHE_DIR").map(PathBuf::from);
        }
        self
    }

    /// Cache epoch: changes whenever anything that shapes responses changes.
    pub fn epoch(&self) -> String {
        let material = json!({"model": self.model, "url": self.url});
        hex::encode(&Sha256::digest(material.to_string().as_bytes())[..8])
    }
}

pub struct Gateway {
    transport: Arc<dyn Transport>,
    cache: ResponseCache,
    retry: RetryPolicy,
    limiter: InflightLimiter,
}

impl Gateway {
    pub fn new(transport: Arc<dyn Transport>, cache: ResponseCache, retry: RetryPolicy, max_in_flight: usize) -> Self {
        Gateway {
            transport,
            cache,
            retry,
            limiter: InflightLimiter::new(max_in_flight),
        }
    }

    /// In-memory cache, no backoff delay. Mostly for tests.
    pub fn with_transport(transport: Arc<dyn Transport>, max_retries: u32) -> Self {
        let cache = ResponseCache::new(None, "test").expect("memory cache");
        Gateway::new(transport, cache, RetryPolicy::no_delay(max_retries), DEFAULT_MAX_IN_FLIGHT)
    }

    pub fn mock(script: MockScript) -> Self {
        Gateway::with_transport(Arc::new(MockTransport::new(script)), 0)
    }

    /// HTTP transport from the config's URL.
    pub fn from_config(cfg: &GatewayConfig) -> Result<Self, GatewayError> {
        let url = cfg
            .url
            .clone()
            .ok_or_else(|| GatewayError::Config("no gateway URL (set GATEWAY_URL or pass --mock)".into()))?;
        let transport = HttpTransport::new(url, cfg.key.clone(), cfg.model.clone(), Duration::from_secs(cfg.timeout_secs));
        Self::from_config_with(cfg, Arc::new(transport))
    }

    /// Any transport with the config's cache, retry and in-flight settings.
    pub fn from_config_with(cfg: &GatewayConfig, transport: Arc<dyn Transport>) -> Result<Self, GatewayError> {
        let cache = ResponseCache::new(cfg.cache_dir.clone(), cfg.epoch())?;
        Ok(Gateway::new(transport, cache, cfg.retry, cfg.max_in_flight))
    }

    pub fn complete(&self, req: &GenerationRequest) -> Result<GenerationResponse, GatewayError> {
        if req.params.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        let key = self.cache.key(req);
        if let Some(hit) = self.cache.get(&key) {
            return Ok(GenerationResponse {
                completion: hit.completion,
                usage: hit.usage,
                meta: TransportMeta { cached: true, retries: 0 },
            });
        }
        let _permit = self.limiter.acquire();
        let mut retries = 0u32;
        loop {
            match self.transport.send(req) {
                Ok(reply) => {
                    if reply.completion.trim().is_empty() {
                        return Err(GatewayError::BadResponse("empty completion".into()));
                    }
                    let stored = self.cache.put(
                        &key,
                        CacheEntry {
                            completion: reply.completion,
                            usage: reply.usage,
                        },
                    );
                    return Ok(GenerationResponse {
                        completion: stored.completion,
                        usage: stored.usage,
                        meta: TransportMeta { cached: false, retries },
                    });
                }
                Err(TransportError::Fatal(msg)) => return Err(GatewayError::BadResponse(msg)),
                Err(TransportError::Transient(msg)) => {
                    if retries >= self.retry.max_retries {
                        return Err(GatewayError::Exhausted {
                            attempts: retries + 1,
                            last: msg,
                        });
                    }
                    log::debug!("transient gateway failure ({msg}); retry {}", retries + 1);
                    std::thread::sleep(self.retry.delay(retries));
                    retries += 1;
                }
            }
        }
    }
}
