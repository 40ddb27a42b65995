//! Uniform access to subject, evaluator, and translator models over the
//! chat-completions wire shape, with a content-addressed response cache and
//! a deterministic fixture backend for offline runs.
//!
//! Every completion goes through [`Gateway::complete`]: cache lookup first,
//! then the backend with bounded retries, then an atomic cache write. The
//! gateway records a call log so tests can assert which backends a pipeline
//! actually touched.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

/// One completion request. Field order is fixed; the cache key hashes the
/// compact serialization, so requests must not be mutated after keying.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl ChatRequest {
    /// Single user-message request.
    pub fn user(model: impl Into<String>, content: impl Into<String>) -> Self {
        ChatRequest {
            model: model.into(),
            messages: vec![ChatMessage {
                role: Role::User,
                content: content.into(),
            }],
            temperature: 0.0,
            max_tokens: 1024,
            seed: None,
        }
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if !self.messages.iter().any(|m| m.role == Role::User) {
            return Err(GatewayError::InvalidRequest(
                "at least one user message required".into(),
            ));
        }
        if self.messages.iter().any(|m| m.content.is_empty()) {
            return Err(GatewayError::InvalidRequest(
                "message content must be non-empty".into(),
            ));
        }
        if self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(
                "temperature must be >= 0".into(),
            ));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest(
                "max_tokens must be > 0".into(),
            ));
        }
        Ok(())
    }

    /// All message contents joined by newlines; what fixture rules and the
    /// call log see.
    pub fn prompt_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub usage: Usage,
}

/// 256-bit digest of the canonical serialization of (backend id, request).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CacheKey([u8; 32]);

impl CacheKey {
    pub fn hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.hex())
    }
}

/// Canonical key: sha-256 over the compact JSON of `(backend_id, request)`.
/// Serde writes struct fields in declaration order and the compact form has
/// no whitespace, so equal requests always produce equal keys.
pub fn cache_key(backend_id: &str, request: &ChatRequest) -> CacheKey {
    let canonical =
        serde_json::to_string(&(backend_id, request)).expect("request serialization cannot fail");
    let digest = Sha256::digest(canonical.as_bytes());
    CacheKey(digest.into())
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("unknown backend \"{0}\"")]
    UnknownBackend(String),
    #[error("[{backend}] transport failure after {attempts} attempt(s): {message}")]
    Transport {
        backend: String,
        attempts: u32,
        message: String,
    },
    #[error("[{backend}] status {code}: {body}")]
    Status {
        backend: String,
        code: u16,
        body: String,
    },
    #[error("[{backend}] malformed response: {message}")]
    MalformedResponse { backend: String, message: String },
    #[error("[{backend}] no fixture rule matched prompt starting {prompt_head:?}")]
    NoFixtureMatch {
        backend: String,
        prompt_head: String,
    },
    #[error("[{backend}] backend returned an empty reply")]
    EmptyReply { backend: String },
    #[error("cache I/O at {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl GatewayError {
    /// Worth retrying? Transport failures and 5xx only.
    fn is_transient(&self) -> bool {
        match self {
            GatewayError::Transport { .. } => true,
            GatewayError::Status { code, .. } => *code >= 500,
            _ => false,
        }
    }
}

/// A chat-completion provider.
pub trait Backend: Send + Sync {
    /// Stable identifier; part of every cache key.
    fn id(&self) -> &str;
    /// One attempt. Retrying is the gateway's job.
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

// ---------------------------------------------------------------------------
// HTTP backend

/// Client for any server speaking `POST {base_url}/v1/chat/completions`.
pub struct HttpBackend {
    id: String,
    base_url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: &'a [ChatMessage],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    content: String,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u32,
    #[serde(default)]
    completion_tokens: u32,
}

impl HttpBackend {
    pub fn new(
        id: impl Into<String>,
        base_url: impl Into<String>,
        api_key: Option<String>,
    ) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .expect("reqwest client");
        HttpBackend {
            id: id.into(),
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            client,
        }
    }
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let url = format!("{}/v1/chat/completions", self.base_url);
        let body = WireRequest {
            model: &request.model,
            messages: &request.messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            seed: request.seed,
        };
        let mut req = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| GatewayError::Transport {
            backend: self.id.clone(),
            attempts: 1,
            message: e.to_string(),
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| GatewayError::Transport {
            backend: self.id.clone(),
            attempts: 1,
            message: e.to_string(),
        })?;
        if !status.is_success() {
            return Err(GatewayError::Status {
                backend: self.id.clone(),
                code: status.as_u16(),
                body: text,
            });
        }
        let wire: WireResponse =
            serde_json::from_str(&text).map_err(|e| GatewayError::MalformedResponse {
                backend: self.id.clone(),
                message: e.to_string(),
            })?;
        let choice =
            wire.choices
                .into_iter()
                .next()
                .ok_or_else(|| GatewayError::MalformedResponse {
                    backend: self.id.clone(),
                    message: "empty choices".into(),
                })?;
        let finish_reason = match choice.finish_reason.as_deref() {
            Some("stop") | None => FinishReason::Stop,
            Some("length") => FinishReason::Length,
            Some(_) => FinishReason::Error,
        };
        if finish_reason == FinishReason::Stop && choice.message.content.is_empty() {
            return Err(GatewayError::MalformedResponse {
                backend: self.id.clone(),
                message: "finish_reason=stop with empty content".into(),
            });
        }
        let usage = wire.usage.map_or(Usage::default(), |u| Usage {
            prompt_tokens: u.prompt_tokens,
            completion_tokens: u.completion_tokens,
        });
        Ok(ChatResponse {
            text: choice.message.content,
            finish_reason,
            usage,
        })
    }
}

// ---------------------------------------------------------------------------
// Fixture backend

/// One scripted behavior. Rules are tried in order; first match wins.
enum FixtureRule {
    /// Regex over the full prompt text; reply may reference capture groups
    /// (`$1`, `${name}`).
    Pattern { regex: Regex, reply: String },
    /// Answers judge prompts ("... True or False?") with "True" exactly when
    /// the fact is a verbatim substring of the passage block.
    SubstringJudge,
}

#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum FixtureRuleRecord {
    Regex { pattern: String, reply: String },
    SubstringJudge,
}

/// Deterministic offline backend: canned response files keyed by cache key,
/// plus ordered prompt rules.
pub struct FixtureBackend {
    id: String,
    rules: Vec<FixtureRule>,
    responses_dir: Option<PathBuf>,
}

impl FixtureBackend {
    pub fn new(id: impl Into<String>) -> Self {
        FixtureBackend {
            id: id.into(),
            rules: Vec::new(),
            responses_dir: None,
        }
    }

    pub fn with_rule(mut self, pattern: &str, reply: impl Into<String>) -> Self {
        let regex = Regex::new(pattern).expect("fixture rule pattern must be a valid regex");
        self.rules.push(FixtureRule::Pattern {
            regex,
            reply: reply.into(),
        });
        self
    }

    pub fn with_substring_judge(mut self) -> Self {
        self.rules.push(FixtureRule::SubstringJudge);
        self
    }

    pub fn with_responses_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.responses_dir = Some(dir.into());
        self
    }

    /// Load rules from a line-delimited file of
    /// `{"kind":"regex","pattern":...,"reply":...}` / `{"kind":"substring_judge"}`
    /// records, kept in file order.
    pub fn with_rules_file(mut self, path: &Path) -> Result<Self, GatewayError> {
        let body = fs::read_to_string(path).map_err(|e| GatewayError::Cache {
            path: path.to_path_buf(),
            source: e,
        })?;
        for (idx, line) in body.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let record: FixtureRuleRecord =
                serde_json::from_str(line).map_err(|e| GatewayError::MalformedResponse {
                    backend: self.id.clone(),
                    message: format!("{}:{}: {e}", path.display(), idx + 1),
                })?;
            match record {
                FixtureRuleRecord::Regex { pattern, reply } => {
                    let regex =
                        Regex::new(&pattern).map_err(|e| GatewayError::MalformedResponse {
                            backend: self.id.clone(),
                            message: format!("{}:{}: bad regex: {e}", path.display(), idx + 1),
                        })?;
                    self.rules.push(FixtureRule::Pattern { regex, reply });
                }
                FixtureRuleRecord::SubstringJudge => self.rules.push(FixtureRule::SubstringJudge),
            }
        }
        Ok(self)
    }

    fn scripted_reply(&self, prompt: &str) -> Option<String> {
        for rule in &self.rules {
            match rule {
                FixtureRule::SubstringJudge => {
                    if let Some((passages, fact)) = parse_judge_prompt(prompt) {
                        let supported = passages.contains(fact.trim());
                        return Some(if supported {
                            "True".into()
                        } else {
                            "False".into()
                        });
                    }
                }
                FixtureRule::Pattern { regex, reply } => {
                    if let Some(caps) = regex.captures(prompt) {
                        let mut out = String::new();
                        caps.expand(reply, &mut out);
                        return Some(out);
                    }
                }
            }
        }
        None
    }
}

/// Split a judge prompt into (passage block, fact). Returns `None` when the
/// prompt does not follow the judge layout.
fn parse_judge_prompt(prompt: &str) -> Option<(&str, &str)> {
    let marker = "\n\nInput: ";
    let input_at = prompt.rfind(marker)?;
    let passages = &prompt[..input_at];
    let tail = &prompt[input_at + marker.len()..];
    let fact = tail
        .strip_suffix("\nOutput:")
        .unwrap_or(tail)
        .strip_suffix(" True or False?")?;
    Some((passages, fact))
}

impl Backend for FixtureBackend {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        if let Some(dir) = &self.responses_dir {
            let path = dir.join(format!("{}.json", cache_key(&self.id, request)));
            if path.exists() {
                let body = fs::read_to_string(&path).map_err(|e| GatewayError::Cache {
                    path: path.clone(),
                    source: e,
                })?;
                return serde_json::from_str(&body).map_err(|e| GatewayError::MalformedResponse {
                    backend: self.id.clone(),
                    message: format!("{}: {e}", path.display()),
                });
            }
        }
        let prompt = request.prompt_text();
        match self.scripted_reply(&prompt) {
            Some(text) => {
                let usage = Usage {
                    prompt_tokens: prompt.split_whitespace().count() as u32,
                    completion_tokens: text.split_whitespace().count() as u32,
                };
                Ok(ChatResponse {
                    text,
                    finish_reason: FinishReason::Stop,
                    usage,
                })
            }
            None => Err(GatewayError::NoFixtureMatch {
                backend: self.id.clone(),
                prompt_head: prompt.chars().take(80).collect(),
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// Response cache

/// One file per key under the cache directory, named by hex digest,
/// published atomically via temp-file-then-rename.
pub struct ResponseCache {
    dir: PathBuf,
}

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, GatewayError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| GatewayError::Cache {
            path: dir.clone(),
            source: e,
        })?;
        Ok(ResponseCache { dir })
    }

    fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    /// A corrupt entry is treated as a miss so it only ever affects its own
    /// key.
    pub fn get(&self, key: &CacheKey) -> Option<ChatResponse> {
        let path = self.path_for(key);
        let body = fs::read_to_string(&path).ok()?;
        match serde_json::from_str(&body) {
            Ok(resp) => Some(resp),
            Err(e) => {
                log::warn!("discarding corrupt cache entry {}: {e}", path.display());
                None
            }
        }
    }

    pub fn put(&self, key: &CacheKey, response: &ChatResponse) -> Result<(), GatewayError> {
        let path = self.path_for(key);
        let body = serde_json::to_string(response).expect("response serialization cannot fail");
        let tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| GatewayError::Cache {
            path: self.dir.clone(),
            source: e,
        })?;
        fs::write(tmp.path(), body).map_err(|e| GatewayError::Cache {
            path: tmp.path().to_path_buf(),
            source: e,
        })?;
        tmp.persist(&path).map_err(|e| GatewayError::Cache {
            path: path.clone(),
            source: e.error,
        })?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Gateway

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            attempts: 3,
            base_delay: Duration::from_millis(200),
        }
    }
}

/// Per-backend request defaults, applied by [`Gateway::request`].
#[derive(Debug, Clone)]
pub struct RequestDefaults {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl RequestDefaults {
    pub fn new(model: impl Into<String>, temperature: f64) -> Self {
        RequestDefaults {
            model: model.into(),
            temperature,
            max_tokens: 1024,
            seed: None,
        }
    }
}

/// One logical completion, recorded whether it was served from cache or not.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CallRecord {
    pub backend: String,
    pub cache_hit: bool,
    pub prompt: String,
}

struct Limiter {
    permits: Mutex<u32>,
    available: Condvar,
}

impl Limiter {
    fn new(permits: u32) -> Self {
        Limiter {
            permits: Mutex::new(permits.max(1)),
            available: Condvar::new(),
        }
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        let mut permits = self.permits.lock().expect("limiter poisoned");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("limiter poisoned");
        }
        *permits -= 1;
        drop(permits);

        // release on unwind too, or a panicking backend would shrink the
        // pool for the rest of the run
        struct Release<'a>(&'a Limiter);
        impl Drop for Release<'_> {
            fn drop(&mut self) {
                let mut permits = self
                    .0
                    .permits
                    .lock()
                    .unwrap_or_else(|poisoned| poisoned.into_inner());
                *permits += 1;
                self.0.available.notify_one();
            }
        }
        let _release = Release(self);
        f()
    }
}

struct BackendSlot {
    backend: Box<dyn Backend>,
    defaults: RequestDefaults,
    limiter: Limiter,
}

/// Routes requests to named backends with caching, retries, bounded
/// in-flight concurrency, and a call log.
pub struct Gateway {
    slots: BTreeMap<String, BackendSlot>,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    log: Mutex<Vec<CallRecord>>,
}

pub struct GatewayBuilder {
    gateway: Gateway,
}

impl GatewayBuilder {
    pub fn backend(
        mut self,
        backend: Box<dyn Backend>,
        defaults: RequestDefaults,
        max_in_flight: u32,
    ) -> Self {
        let name = backend.id().to_string();
        self.gateway.slots.insert(
            name,
            BackendSlot {
                backend,
                defaults,
                limiter: Limiter::new(max_in_flight),
            },
        );
        self
    }

    pub fn cache(mut self, cache: ResponseCache) -> Self {
        self.gateway.cache = Some(cache);
        self
    }

    pub fn retry(mut self, retry: RetryPolicy) -> Self {
        self.gateway.retry = retry;
        self
    }

    pub fn build(self) -> Gateway {
        self.gateway
    }
}

impl Gateway {
    pub fn builder() -> GatewayBuilder {
        GatewayBuilder {
            gateway: Gateway {
                slots: BTreeMap::new(),
                cache: None,
                retry: RetryPolicy::default(),
                log: Mutex::new(Vec::new()),
            },
        }
    }

    fn slot(&self, backend: &str) -> Result<&BackendSlot, GatewayError> {
        self.slots
            .get(backend)
            .ok_or_else(|| GatewayError::UnknownBackend(backend.to_string()))
    }

    /// The configured request defaults of `backend`.
    pub fn defaults(&self, backend: &str) -> Result<&RequestDefaults, GatewayError> {
        Ok(&self.slot(backend)?.defaults)
    }

    /// Build a request against `backend`'s configured model and decoding
    /// defaults.
    pub fn request(
        &self,
        backend: &str,
        content: impl Into<String>,
    ) -> Result<ChatRequest, GatewayError> {
        let defaults = &self.slot(backend)?.defaults;
        Ok(ChatRequest {
            model: defaults.model.clone(),
            messages: vec![ChatMessage {
                role: Role::User,
                content: content.into(),
            }],
            temperature: defaults.temperature,
            max_tokens: defaults.max_tokens,
            seed: defaults.seed,
        })
    }

    /// Complete `request` against `backend`: cache hit returns the stored
    /// response without touching the backend; a miss calls the backend with
    /// bounded exponential backoff and persists the response.
    pub fn complete(
        &self,
        backend: &str,
        request: &ChatRequest,
    ) -> Result<ChatResponse, GatewayError> {
        request.validate()?;
        let slot = self.slot(backend)?;
        let key = cache_key(slot.backend.id(), request);
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&key) {
                self.record(backend, true, request);
                return Ok(hit);
            }
        }
        let response = slot
            .limiter
            .run(|| self.complete_with_retry(slot, request))?;
        self.record(backend, false, request);
        if let Some(cache) = &self.cache {
            cache.put(&key, &response)?;
        }
        Ok(response)
    }

    fn complete_with_retry(
        &self,
        slot: &BackendSlot,
        request: &ChatRequest,
    ) -> Result<ChatResponse, GatewayError> {
        let mut last_err = None;
        for attempt in 1..=self.retry.attempts.max(1) {
            match slot.backend.complete(request) {
                Ok(resp) => return Ok(resp),
                Err(err) if err.is_transient() => {
                    log::debug!("[{}] attempt {attempt} failed: {err}", slot.backend.id());
                    last_err = Some(err);
                    if attempt < self.retry.attempts {
                        std::thread::sleep(self.retry.base_delay * 2u32.pow(attempt - 1));
                    }
                }
                Err(err) => return Err(err),
            }
        }
        let message = last_err.map(|e| e.to_string()).unwrap_or_default();
        Err(GatewayError::Transport {
            backend: slot.backend.id().to_string(),
            attempts: self.retry.attempts.max(1),
            message,
        })
    }

    /// Translate `text` between two of the 19 supported languages via the
    /// named backend.
    pub fn translate(
        &self,
        backend: &str,
        text: &str,
        source: &str,
        target: &str,
    ) -> Result<String, GatewayError> {
        if source == target {
            return Err(GatewayError::InvalidRequest(format!(
                "translation source and target are both \"{source}\""
            )));
        }
        if text.is_empty() {
            return Err(GatewayError::InvalidRequest(
                "translation text must be non-empty".into(),
            ));
        }
        let name = |code: &str| {
            corpus::language(code).map(|l| l.name).ok_or_else(|| {
                GatewayError::InvalidRequest(format!("unknown language code \"{code}\""))
            })
        };
        let prompt = format!(
            "Translate the following text from {} to {}. Output only the translation.\n\n{}",
            name(source)?,
            name(target)?,
            text
        );
        let request = self.request(backend, prompt)?;
        let response = self.complete(backend, &request)?;
        let translated = response.text.trim().to_string();
        if translated.is_empty() {
            return Err(GatewayError::EmptyReply {
                backend: backend.to_string(),
            });
        }
        Ok(translated)
    }

    fn record(&self, backend: &str, cache_hit: bool, request: &ChatRequest) {
        self.log
            .lock()
            .expect("call log poisoned")
            .push(CallRecord {
                backend: backend.to_string(),
                cache_hit,
                prompt: request.prompt_text(),
            });
    }

    /// Snapshot of every logical completion so far, in call order.
    pub fn call_log(&self) -> Vec<CallRecord> {
        self.log.lock().expect("call log poisoned").clone()
    }

    /// Completions that actually reached a backend (cache misses).
    pub fn backend_calls(&self) -> usize {
        self.log
            .lock()
            .expect("call log poisoned")
            .iter()
            .filter(|r| !r.cache_hit)
            .count()
    }
}
