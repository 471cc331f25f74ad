//! Chat-completion and embedding access over the OpenAI-compatible wire
//! protocol, with a content-addressed record/replay store.
//!
//! Three modes, selected by [`ReplayMode`] (env `RTK_REPLAY_MODE`):
//!
//! - `live`: every call goes upstream; responses are still written to the store.
//! - `record`: the store is consulted first; misses go upstream and are written back.
//! - `replay`: only the store is consulted; a miss is an error naming the key.
//!
//! Chat responses are keyed by [`request_hash`], a SHA-256 over a canonical
//! JSON serialization (sorted keys, NFC text) of model, messages and
//! decoding. Embeddings are cached per input text. The store file is
//! `{"chat": {hash: response}, "embed": {text: [f64, ..]}}` and is rewritten
//! atomically (temp file + rename) after every insert.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

pub const ENV_API_BASE: &str = "RTK_API_BASE";
pub const ENV_API_KEY: &str = "RTK_API_KEY";
pub const ENV_REPLAY_MODE: &str = "RTK_REPLAY_MODE";

pub const DEFAULT_CONTEXT_TOKENS: usize = 128_000;
pub const CHARS_PER_TOKEN: usize = 4;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("request of ~{approx_tokens} tokens exceeds the context budget of {budget}")]
    ContextBudget { approx_tokens: usize, budget: usize },
    #[error("replay miss for {kind} key {key}")]
    ReplayMiss { kind: &'static str, key: String },
    #[error("no upstream configured for {0} mode")]
    NoUpstream(ReplayMode),
    #[error("upstream failed after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("upstream error: {0}")]
    Upstream(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("store {path}: {message}")]
    Store { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayMode {
    Live,
    Record,
    Replay,
}

impl std::fmt::Display for ReplayMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ReplayMode::Live => "live",
            ReplayMode::Record => "record",
            ReplayMode::Replay => "replay",
        })
    }
}

impl std::str::FromStr for ReplayMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "live" => Ok(Self::Live),
            "record" => Ok(Self::Record),
            "replay" => Ok(Self::Replay),
            other => Err(format!("unknown replay mode `{other}` (live, record, replay)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodingMode {
    Greedy,
    Sampled,
}

/// Decoding parameters. Under `greedy`, temperature and top-p are ignored
/// both on the wire and in the request hash.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingConfig {
    pub mode: DecodingMode,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_top_p")]
    pub top_p: f64,
}

fn default_temperature() -> f64 {
    0.1
}

fn default_top_p() -> f64 {
    0.9
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self::greedy()
    }
}

impl DecodingConfig {
    pub fn greedy() -> Self {
        Self {
            mode: DecodingMode::Greedy,
            temperature: default_temperature(),
            top_p: default_top_p(),
        }
    }

    pub fn sampled(temperature: f64, top_p: f64) -> Self {
        Self {
            mode: DecodingMode::Sampled,
            temperature,
            top_p,
        }
    }

    /// Sampled variant of `self` used for the single retry after a parse failure.
    pub fn for_retry(&self) -> Self {
        Self::sampled(self.temperature, self.top_p)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.mode == DecodingMode::Greedy {
            return Ok(());
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(format!("temperature must be >= 0, got {}", self.temperature));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p must be in (0, 1], got {}", self.top_p));
        }
        Ok(())
    }

    fn canonical(&self) -> Value {
        match self.mode {
            DecodingMode::Greedy => json!({ "mode": "greedy" }),
            DecodingMode::Sampled => json!({
                "mode": "sampled",
                "temperature": self.temperature,
                "top_p": self.top_p,
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub decoding: DecodingConfig,
    /// Distinguishes deliberate re-asks of an identical prompt; only
    /// non-zero values enter the request hash.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub attempt: u32,
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

impl ChatRequest {
    /// A single user message, the shape every pipeline prompt takes.
    pub fn single_user(model: impl Into<String>, prompt: impl Into<String>, decoding: DecodingConfig) -> Self {
        Self {
            model: model.into(),
            messages: vec![Message::user(prompt)],
            decoding,
            attempt: 0,
        }
    }

    /// The user prompt of a single-message request.
    pub fn prompt(&self) -> &str {
        self.messages
            .iter()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }

    pub fn approx_tokens(&self) -> usize {
        let chars: usize = self.messages.iter().map(|m| m.content.chars().count()).sum();
        chars.div_ceil(CHARS_PER_TOKEN)
    }

    /// The retry variant: same prompt, sampled decoding, next attempt number.
    pub fn retry(&self) -> Self {
        Self {
            decoding: self.decoding.for_retry(),
            attempt: self.attempt + 1,
            ..self.clone()
        }
    }

    fn wire_body(&self) -> Value {
        let messages: Vec<Value> = self
            .messages
            .iter()
            .map(|m| json!({ "role": m.role.as_str(), "content": m.content }))
            .collect();
        let mut body = json!({ "model": self.model, "messages": messages, "stream": false });
        match self.decoding.mode {
            DecodingMode::Greedy => {
                body["temperature"] = json!(0.0);
            }
            DecodingMode::Sampled => {
                body["temperature"] = json!(self.decoding.temperature);
                body["top_p"] = json!(self.decoding.top_p);
            }
        }
        body
    }
}

fn nfc(s: &str) -> String {
    s.nfc().collect()
}

/// Content hash of a chat request: SHA-256 hex over canonical JSON.
pub fn request_hash(req: &ChatRequest) -> String {
    let messages: Vec<Value> = req
        .messages
        .iter()
        .map(|m| json!({ "role": m.role.as_str(), "content": nfc(&m.content) }))
        .collect();
    let mut canon = json!({
        "model": nfc(&req.model),
        "messages": messages,
        "decoding": req.decoding.canonical(),
    });
    if req.attempt > 0 {
        canon["attempt"] = json!(req.attempt);
    }
    // serde_json's default map is ordered, so keys serialize sorted.
    let bytes = serde_json::to_vec(&canon).expect("canonical request serializes");
    hex::encode(Sha256::digest(&bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub model: String,
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedding {
    pub vector: Vec<f64>,
    pub source_text: String,
}

/// Failure of one upstream attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UpstreamError {
    /// Worth retrying: transport failures, 408, 429, 5xx.
    Transient(String),
    /// Reported verbatim, never retried.
    Fatal(String),
}

impl std::fmt::Display for UpstreamError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            UpstreamError::Transient(m) => write!(f, "transient: {m}"),
            UpstreamError::Fatal(m) => write!(f, "{m}"),
        }
    }
}

/// A model server. One call is one attempt; retries live in [`Gateway`].
pub trait Upstream: Send + Sync {
    fn chat(&self, req: &ChatRequest) -> Result<String, UpstreamError>;
    fn embed(&self, model: &str, inputs: &[String]) -> Result<Vec<Vec<f64>>, UpstreamError>;
}

/// OpenAI-compatible HTTP server (`/v1/chat/completions`, `/v1/embeddings`).
pub struct HttpUpstream {
    base: String,
    api_key: Option<String>,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct ChatResponseBody {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbedResponseBody {
    data: Vec<EmbedDatum>,
}

#[derive(Deserialize)]
struct EmbedDatum {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f64>,
}

impl HttpUpstream {
    pub fn new(api_base: &str, api_key: Option<String>, timeout: Duration) -> Self {
        let base = api_base.trim_end_matches('/');
        let base = base.strip_suffix("/v1").unwrap_or(base).to_string();
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { base, api_key, agent }
    }

    fn post(&self, path: &str, body: &Value) -> Result<String, UpstreamError> {
        let url = format!("{}/v1/{}", self.base, path);
        let mut req = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| UpstreamError::Transient(format!("POST {url}: {e}")))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| UpstreamError::Transient(format!("reading body from {url}: {e}")))?;
        match status {
            200..=299 => Ok(text),
            408 | 429 | 500..=599 => Err(UpstreamError::Transient(format!("HTTP {status}: {text}"))),
            _ => Err(UpstreamError::Fatal(format!("HTTP {status}: {text}"))),
        }
    }
}

impl Upstream for HttpUpstream {
    fn chat(&self, req: &ChatRequest) -> Result<String, UpstreamError> {
        let text = self.post("chat/completions", &req.wire_body())?;
        let body: ChatResponseBody = serde_json::from_str(&text)
            .map_err(|e| UpstreamError::Fatal(format!("bad chat response ({e}): {text}")))?;
        body.choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| UpstreamError::Fatal(format!("chat response without content: {text}")))
    }

    fn embed(&self, model: &str, inputs: &[String]) -> Result<Vec<Vec<f64>>, UpstreamError> {
        let text = self.post("embeddings", &json!({ "model": model, "input": inputs }))?;
        let body: EmbedResponseBody = serde_json::from_str(&text)
            .map_err(|e| UpstreamError::Fatal(format!("bad embedding response ({e}): {text}")))?;
        let mut data = body.data;
        if data.len() != inputs.len() {
            return Err(UpstreamError::Fatal(format!(
                "expected {} embeddings, got {}",
                inputs.len(),
                data.len()
            )));
        }
        if data.iter().all(|d| d.index.is_some()) {
            data.sort_by_key(|d| d.index);
        }
        Ok(data.into_iter().map(|d| d.embedding).collect())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StoreData {
    #[serde(default)]
    pub chat: BTreeMap<String, String>,
    #[serde(default)]
    pub embed: BTreeMap<String, Vec<f64>>,
}

/// In-memory response store, optionally persisted to a JSON file.
/// Readers run concurrently; writers are serialized.
pub struct ReplayStore {
    data: RwLock<StoreData>,
    path: Option<PathBuf>,
    write_lock: Mutex<()>,
}

impl ReplayStore {
    pub fn in_memory(data: StoreData) -> Self {
        Self {
            data: RwLock::new(data),
            path: None,
            write_lock: Mutex::new(()),
        }
    }

    /// Opens a persisted store, starting empty if the file does not exist.
    pub fn open(path: &Path) -> Result<Self, GatewayError> {
        let data = read_store(path, true)?;
        Ok(Self {
            data: RwLock::new(data),
            path: Some(path.to_path_buf()),
            write_lock: Mutex::new(()),
        })
    }

    pub fn chat(&self, key: &str) -> Option<String> {
        self.data.read().expect("store poisoned").chat.get(key).cloned()
    }

    pub fn embedding(&self, text: &str) -> Option<Vec<f64>> {
        self.data.read().expect("store poisoned").embed.get(text).cloned()
    }

    pub fn snapshot(&self) -> StoreData {
        self.data.read().expect("store poisoned").clone()
    }

    fn insert_chat(&self, key: String, response: String) -> Result<(), GatewayError> {
        let _w = self.write_lock.lock().expect("store poisoned");
        self.data.write().expect("store poisoned").chat.insert(key, response);
        self.persist()
    }

    fn insert_embeddings(&self, items: Vec<(String, Vec<f64>)>) -> Result<(), GatewayError> {
        let _w = self.write_lock.lock().expect("store poisoned");
        {
            let mut data = self.data.write().expect("store poisoned");
            for (text, v) in items {
                data.embed.insert(text, v);
            }
        }
        self.persist()
    }

    // Caller holds `write_lock`.
    fn persist(&self) -> Result<(), GatewayError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let err = |message: String| GatewayError::Store {
            path: path.display().to_string(),
            message,
        };
        let bytes = {
            let data = self.data.read().expect("store poisoned");
            serde_json::to_vec_pretty(&*data).map_err(|e| err(e.to_string()))?
        };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
        }
        let mut tmp = path.clone().into_os_string();
        tmp.push(format!(".tmp-{}", std::process::id()));
        let tmp = PathBuf::from(tmp);
        fs::write(&tmp, &bytes).map_err(|e| err(e.to_string()))?;
        fs::rename(&tmp, path).map_err(|e| err(e.to_string()))
    }
}

fn read_store(path: &Path, missing_ok: bool) -> Result<StoreData, GatewayError> {
    let err = |message: String| GatewayError::Store {
        path: path.display().to_string(),
        message,
    };
    match fs::read_to_string(path) {
        Ok(s) if s.trim().is_empty() => Ok(StoreData::default()),
        Ok(s) => serde_json::from_str(&s).map_err(|e| err(e.to_string())),
        Err(e) if missing_ok && e.kind() == std::io::ErrorKind::NotFound => Ok(StoreData::default()),
        Err(e) => Err(err(e.to_string())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewaySettings {
    pub mode: ReplayMode,
    #[serde(default)]
    pub api_base: Option<String>,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_context_tokens")]
    pub context_budget_tokens: usize,
    #[serde(default = "default_timeout_s")]
    pub timeout_s: u64,
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
}

fn default_max_attempts() -> u32 {
    5
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_in_flight() -> usize {
    4
}
fn default_context_tokens() -> usize {
    DEFAULT_CONTEXT_TOKENS
}
fn default_timeout_s() -> u64 {
    600
}

impl Default for GatewaySettings {
    fn default() -> Self {
        Self {
            mode: ReplayMode::Replay,
            api_base: None,
            max_attempts: default_max_attempts(),
            backoff_base_ms: default_backoff_ms(),
            max_in_flight: default_in_flight(),
            context_budget_tokens: default_context_tokens(),
            timeout_s: default_timeout_s(),
            cache_path: None,
        }
    }
}

/// Counters exposed for run manifests.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub cache_hits: u64,
    pub upstream_requests: u64,
    pub retries: u64,
}

#[derive(Default)]
struct Counters {
    cache_hits: AtomicU64,
    upstream_requests: AtomicU64,
    retries: AtomicU64,
}

struct Semaphore {
    permits: Mutex<usize>,
    freed: Condvar,
}

impl Semaphore {
    fn new(n: usize) -> Self {
        Self {
            permits: Mutex::new(n.max(1)),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut p = self.permits.lock().expect("semaphore poisoned");
        while *p == 0 {
            p = self.freed.wait(p).expect("semaphore poisoned");
        }
        *p -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.permits.lock().expect("semaphore poisoned") += 1;
        self.0.freed.notify_one();
    }
}

/// Shareable handle for all model traffic.
pub struct Gateway {
    settings: GatewaySettings,
    store: Arc<ReplayStore>,
    upstream: Option<Arc<dyn Upstream>>,
    in_flight: Semaphore,
    counters: Counters,
}

impl Gateway {
    pub fn new(settings: GatewaySettings, store: ReplayStore, upstream: Option<Arc<dyn Upstream>>) -> Self {
        let in_flight = Semaphore::new(settings.max_in_flight);
        Self {
            settings,
            store: Arc::new(store),
            upstream,
            in_flight,
            counters: Counters::default(),
        }
    }

    /// Builds a gateway from settings: opens the cache file (if any) and an
    /// HTTP upstream when an API base is configured.
    pub fn from_settings(settings: GatewaySettings, api_key: Option<String>) -> Result<Self, GatewayError> {
        let store = match &settings.cache_path {
            Some(p) if settings.mode == ReplayMode::Replay => ReplayStore::in_memory(read_store(p, false)?),
            Some(p) => ReplayStore::open(p)?,
            None => ReplayStore::in_memory(StoreData::default()),
        };
        let upstream: Option<Arc<dyn Upstream>> = match (&settings.api_base, settings.mode) {
            (Some(base), ReplayMode::Live | ReplayMode::Record) => Some(Arc::new(HttpUpstream::new(
                base,
                api_key,
                Duration::from_secs(settings.timeout_s),
            ))),
            _ => None,
        };
        Ok(Self::new(settings, store, upstream))
    }

    pub fn settings(&self) -> &GatewaySettings {
        &self.settings
    }

    pub fn mode(&self) -> ReplayMode {
        self.settings.mode
    }

    pub fn store(&self) -> &ReplayStore {
        &self.store
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            cache_hits: self.counters.cache_hits.load(Ordering::SeqCst),
            upstream_requests: self.counters.upstream_requests.load(Ordering::SeqCst),
            retries: self.counters.retries.load(Ordering::SeqCst),
        }
    }

    pub fn max_in_flight(&self) -> usize {
        self.settings.max_in_flight.max(1)
    }

    fn upstream(&self) -> Result<&dyn Upstream, GatewayError> {
        self.upstream
            .as_deref()
            .ok_or(GatewayError::NoUpstream(self.settings.mode))
    }

    fn with_retries<T>(&self, mut call: impl FnMut() -> Result<T, UpstreamError>) -> Result<T, GatewayError> {
        let attempts = self.settings.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                self.counters.retries.fetch_add(1, Ordering::SeqCst);
                let delay = self.settings.backoff_base_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            let _permit = self.in_flight.acquire();
            self.counters.upstream_requests.fetch_add(1, Ordering::SeqCst);
            match call() {
                Ok(v) => return Ok(v),
                Err(UpstreamError::Fatal(m)) => return Err(GatewayError::Upstream(m)),
                Err(UpstreamError::Transient(m)) => {
                    log::warn!("upstream attempt {} of {attempts} failed: {m}", attempt + 1);
                    last = m;
                }
            }
        }
        Err(GatewayError::RetriesExhausted { attempts, last })
    }

    pub fn chat(&self, req: &ChatRequest) -> Result<String, GatewayError> {
        if !req.messages.iter().any(|m| m.role == Role::User) {
            return Err(GatewayError::InvalidRequest(
                "at least one user message is required".into(),
            ));
        }
        req.decoding.validate().map_err(GatewayError::InvalidRequest)?;
        let approx_tokens = req.approx_tokens();
        if approx_tokens > self.settings.context_budget_tokens {
            return Err(GatewayError::ContextBudget {
                approx_tokens,
                budget: self.settings.context_budget_tokens,
            });
        }
        let key = request_hash(req);
        if self.settings.mode != ReplayMode::Live {
            if let Some(hit) = self.store.chat(&key) {
                self.counters.cache_hits.fetch_add(1, Ordering::SeqCst);
                return Ok(hit);
            }
        }
        if self.settings.mode == ReplayMode::Replay {
            return Err(GatewayError::ReplayMiss { kind: "chat", key });
        }
        let upstream = self.upstream()?;
        let response = self.with_retries(|| upstream.chat(req))?;
        self.store.insert_chat(key, response.clone())?;
        Ok(response)
    }

    pub fn embed(&self, req: &EmbedRequest) -> Result<Vec<Embedding>, GatewayError> {
        if req.inputs.is_empty() {
            return Err(GatewayError::InvalidRequest(
                "embedding inputs must be non-empty".into(),
            ));
        }
        if let Some(i) = req.inputs.iter().position(|s| s.is_empty()) {
            return Err(GatewayError::InvalidRequest(format!("embedding input {i} is empty")));
        }
        let keys: Vec<String> = req.inputs.iter().map(|s| nfc(s)).collect();
        let mut found: HashMap<String, Vec<f64>> = HashMap::new();
        let mut missing: Vec<String> = Vec::new();
        for k in &keys {
            if found.contains_key(k) || missing.contains(k) {
                continue;
            }
            match self
                .store
                .embedding(k)
                .filter(|_| self.settings.mode != ReplayMode::Live)
            {
                Some(v) => {
                    self.counters.cache_hits.fetch_add(1, Ordering::SeqCst);
                    found.insert(k.clone(), v);
                }
                None => missing.push(k.clone()),
            }
        }
        if !missing.is_empty() {
            if self.settings.mode == ReplayMode::Replay {
                return Err(GatewayError::ReplayMiss {
                    kind: "embed",
                    key: missing[0].clone(),
                });
            }
            let upstream = self.upstream()?;
            let vectors = self.with_retries(|| upstream.embed(&req.model, &missing))?;
            if vectors.len() != missing.len() {
                return Err(GatewayError::Upstream(format!(
                    "expected {} embeddings, got {}",
                    missing.len(),
                    vectors.len()
                )));
            }
            let fresh: Vec<(String, Vec<f64>)> = missing.into_iter().zip(vectors).collect();
            self.store.insert_embeddings(fresh.clone())?;
            found.extend(fresh);
        }

        let mut out = Vec::with_capacity(keys.len());
        let mut dim: Option<usize> = None;
        for (text, key) in req.inputs.iter().zip(&keys) {
            let vector = found[key].clone();
            if vector.iter().any(|x| !x.is_finite()) {
                return Err(GatewayError::Upstream(format!("non-finite embedding for `{text}`")));
            }
            match dim {
                None => dim = Some(vector.len()),
                Some(d) if d != vector.len() => {
                    return Err(GatewayError::DimensionMismatch {
                        expected: d,
                        got: vector.len(),
                    })
                }
                _ => {}
            }
            out.push(Embedding {
                vector,
                source_text: text.clone(),
            });
        }
        Ok(out)
    }
}

/// Model id plus decoding, shared by every prompting step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model: String,
    #[serde(default)]
    pub decoding: DecodingConfig,
}

impl ModelConfig {
    pub fn new(model: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            decoding: DecodingConfig::greedy(),
        }
    }

    pub fn request(&self, prompt: impl Into<String>) -> ChatRequest {
        ChatRequest::single_user(self.model.clone(), prompt, self.decoding)
    }
}

/// Outcome of a chat call whose response went through a parser.
#[derive(Debug, Clone)]
pub struct Parsed<T> {
    pub value: Result<T, crate::ParseFailure>,
    /// The response the value came from (the last one on failure).
    pub raw: String,
    pub attempts: u32,
}

impl Gateway {
    /// Sends `req` and parses the reply; on a parse failure re-asks once
    /// with the identical prompt under sampled decoding.
    pub fn chat_parsed<T>(
        &self,
        req: &ChatRequest,
        parse: impl Fn(&str) -> Result<T, crate::ParseFailure>,
    ) -> Result<Parsed<T>, GatewayError> {
        let raw = self.chat(req)?;
        match parse(&raw) {
            Ok(v) => Ok(Parsed {
                value: Ok(v),
                raw,
                attempts: 1,
            }),
            Err(_) => {
                let raw = self.chat(&req.retry())?;
                Ok(Parsed {
                    value: parse(&raw),
                    raw,
                    attempts: 2,
                })
            }
        }
    }
}

/// Deterministic replay-only gateway over a fixture file
/// (`{"chat": {hash: response}, "embed": {text: vector}}`).
pub fn mock_backend(fixtures: &Path) -> Result<Gateway, GatewayError> {
    let data = read_store(fixtures, false)?;
    Ok(Gateway::new(
        GatewaySettings {
            mode: ReplayMode::Replay,
            ..GatewaySettings::default()
        },
        ReplayStore::in_memory(data),
        None,
    ))
}
