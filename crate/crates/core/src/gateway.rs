//! Uniform access to chat-completion backends with a record/replay store.
//!
//! Every model call in the pipeline is a [`ChatRequest`] sent through a
//! [`Gateway`]. Requests are identified by a SHA-256 fingerprint of their
//! canonical JSON form. In [`ReplayMode::Record`] live responses are written
//! to `<root>/<fingerprint>.json`; in [`ReplayMode::Replay`] they are served
//! from there and a miss is an error, never a live call.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::util::write_atomic;

pub const ENV_ENDPOINT: &str = "KRPO_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "KRPO_LLM_API_KEY";
pub const ENV_MODEL: &str = "KRPO_LLM_MODEL";

const FINGERPRINT_DOMAIN: &[u8] = b"krpo-chat-request-v1\0";

/// What a request is for. Part of the fingerprint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Extract,
    Restore,
    Nli,
    Grad1,
    Grad2,
    Update,
    RcDecide,
}

impl Role {
    pub const ALL: [Role; 7] =
        [Role::Extract, Role::Restore, Role::Nli, Role::Grad1, Role::Grad2, Role::Update, Role::RcDecide];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Extract => "extract",
            Role::Restore => "restore",
            Role::Nli => "nli",
            Role::Grad1 => "grad1",
            Role::Grad2 => "grad2",
            Role::Update => "update",
            Role::RcDecide => "rc_decide",
        }
    }

    pub fn default_max_tokens(self) -> u32 {
        match self {
            Role::Extract => 1024,
            Role::Restore => 128,
            Role::Nli => 256,
            Role::Grad1 | Role::Grad2 => 1024,
            Role::Update => 2048,
            Role::RcDecide => 64,
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_text: Option<String>,
    pub user_text: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub role: Role,
}

impl ChatRequest {
    /// Temperature 0 and the role's default output budget.
    pub fn new(role: Role, system_text: Option<String>, user_text: impl Into<String>) -> Self {
        Self {
            system_text,
            user_text: user_text.into(),
            temperature: 0.0,
            max_output_tokens: role.default_max_tokens(),
            role,
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    fn validate(&self) -> Result<(), GatewayError> {
        if self.user_text.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("user_text is empty".into()));
        }
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(GatewayError::InvalidRequest(format!("temperature {} is not >= 0", self.temperature)));
        }
        if self.max_output_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_output_tokens is 0".into()));
        }
        Ok(())
    }

    fn envelope(&self) -> RequestEnvelope {
        RequestEnvelope {
            system: self.system_text.clone(),
            user: self.user_text.clone(),
            temperature: self.temperature,
            max_tokens: self.max_output_tokens,
            tag: self.role,
        }
    }

    /// Stable hex SHA-256 digest of the request.
    pub fn fingerprint(&self) -> String {
        self.envelope().fingerprint()
    }
}

/// The request as stored on disk. Field order is part of the fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestEnvelope {
    pub system: Option<String>,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub tag: Role,
}

impl RequestEnvelope {
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("request envelope serializes");
        let mut hasher = Sha256::new();
        hasher.update(FINGERPRINT_DOMAIN);
        hasher.update(&canonical);
        hex::encode(hasher.finalize())
    }
}

/// One file in the replay store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordFile {
    pub fingerprint: String,
    pub request: RequestEnvelope,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatResponse {
    pub text: String,
    pub backend_id: String,
    pub latency_ms: u64,
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("no recorded response for {role} request {fingerprint}")]
    ReplayMiss { fingerprint: String, role: Role },
    #[error("backend error: {0}")]
    Backend(String),
    #[error("no live backend configured: {0}")]
    NotConfigured(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("replay store {path}: {source}")]
    Store { path: PathBuf, source: io::Error },
    #[error("corrupt replay record {path}: {message}")]
    CorruptRecord { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    /// Worth retrying: connection failures, timeouts, 429 and 5xx.
    #[error("transient: {0}")]
    Transient(String),
    #[error("{0}")]
    Fatal(String),
}

/// A live chat backend.
pub trait Transport: Send + Sync {
    fn backend_id(&self) -> &str;
    fn send(&self, req: &ChatRequest) -> Result<String, TransportError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReplayMode {
    Record,
    Replay,
    /// Live calls only; nothing is read from or written to the store.
    #[serde(alias = "off")]
    Passthrough,
}

impl FromStr for ReplayMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "record" => Ok(ReplayMode::Record),
            "replay" => Ok(ReplayMode::Replay),
            "off" | "passthrough" => Ok(ReplayMode::Passthrough),
            other => Err(format!("unknown replay mode {other:?} (expected record, replay or off)")),
        }
    }
}

#[derive(Debug)]
pub struct ReplayStore {
    root: PathBuf,
    mode: ReplayMode,
    write_lock: Mutex<()>,
}

impl ReplayStore {
    pub fn new(root: impl Into<PathBuf>, mode: ReplayMode) -> Self {
        Self { root: root.into(), mode, write_lock: Mutex::new(()) }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn mode(&self) -> ReplayMode {
        self.mode
    }

    pub fn record_path(&self, fingerprint: &str) -> PathBuf {
        self.root.join(format!("{fingerprint}.json"))
    }

    pub fn lookup(&self, fingerprint: &str) -> Result<Option<RecordFile>, GatewayError> {
        let path = self.record_path(fingerprint);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(source) => return Err(GatewayError::Store { path, source }),
        };
        let record: RecordFile = serde_json::from_slice(&bytes)
            .map_err(|e| GatewayError::CorruptRecord { path: path.clone(), message: e.to_string() })?;
        if record.fingerprint != fingerprint {
            return Err(GatewayError::CorruptRecord {
                path,
                message: format!("stored fingerprint {} does not match file name", record.fingerprint),
            });
        }
        Ok(Some(record))
    }

    pub fn persist(&self, record: &RecordFile) -> Result<(), GatewayError> {
        let path = self.record_path(&record.fingerprint);
        let mut body = serde_json::to_vec_pretty(record).expect("record serializes");
        body.push(b'\n');
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        write_atomic(&path, &body).map_err(|source| GatewayError::Store { path, source })
    }

    /// All records in the store, sorted by fingerprint.
    pub fn records(&self) -> Result<Vec<RecordFile>, GatewayError> {
        let entries = match fs::read_dir(&self.root) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(source) => return Err(GatewayError::Store { path: self.root.clone(), source }),
        };
        let mut out = Vec::new();
        for entry in entries {
            let path = entry.map_err(|source| GatewayError::Store { path: self.root.clone(), source })?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let bytes = fs::read(&path).map_err(|source| GatewayError::Store { path: path.clone(), source })?;
            let record: RecordFile = serde_json::from_slice(&bytes)
                .map_err(|e| GatewayError::CorruptRecord { path: path.clone(), message: e.to_string() })?;
            out.push(record);
        }
        out.sort_by(|a, b| a.fingerprint.cmp(&b.fingerprint));
        Ok(out)
    }
}

/// Exponential backoff for transient transport failures.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_delay: Duration,
    pub multiplier: u32,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            initial_delay: Duration::from_millis(500),
            multiplier: 2,
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        Self { max_attempts, initial_delay: Duration::ZERO, multiplier: 2, max_delay: Duration::ZERO }
    }

    pub fn delay_for(&self, retry: u32) -> Duration {
        let factor = self.multiplier.saturating_pow(retry);
        self.initial_delay.saturating_mul(factor).min(self.max_delay)
    }

    /// Runs `op` until it succeeds, fails fatally, or attempts run out.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, TransportError>) -> Result<T, TransportError> {
        let attempts = self.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(TransportError::Transient(msg)) if attempt + 1 < attempts => {
                    let delay = self.delay_for(attempt);
                    tracing::warn!(attempt = attempt + 1, ?delay, "transient backend failure: {msg}");
                    thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Per-role request counters.
#[derive(Debug, Default)]
pub struct CallStats {
    requests: [AtomicUsize; 7],
    live: AtomicUsize,
    store_hits: AtomicUsize,
}

impl CallStats {
    /// Number of `complete` calls made for `role`, however they were served.
    pub fn requests(&self, role: Role) -> usize {
        self.requests[role.index()].load(Ordering::Relaxed)
    }

    pub fn live_calls(&self) -> usize {
        self.live.load(Ordering::Relaxed)
    }

    pub fn store_hits(&self) -> usize {
        self.store_hits.load(Ordering::Relaxed)
    }

    pub fn total_requests(&self) -> usize {
        Role::ALL.iter().map(|r| self.requests(*r)).sum()
    }
}

pub struct Gateway {
    store: ReplayStore,
    transport: Option<Arc<dyn Transport>>,
    retry: RetryPolicy,
    stats: CallStats,
}

impl fmt::Debug for Gateway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Gateway")
            .field("store", &self.store)
            .field("transport", &self.transport.as_ref().map(|t| t.backend_id().to_owned()))
            .field("retry", &self.retry)
            .finish()
    }
}

impl Gateway {
    /// `transport` may only be `None` in replay mode.
    pub fn new(store: ReplayStore, transport: Option<Arc<dyn Transport>>) -> Result<Self, GatewayError> {
        if store.mode() != ReplayMode::Replay && transport.is_none() {
            return Err(GatewayError::NotConfigured(format!(
                "{:?} mode needs a live backend ({ENV_ENDPOINT}, {ENV_API_KEY}, {ENV_MODEL})",
                store.mode()
            )));
        }
        Ok(Self { store, transport, retry: RetryPolicy::default(), stats: CallStats::default() })
    }

    /// A gateway that only ever reads from `root`.
    pub fn replay(root: impl Into<PathBuf>) -> Self {
        Self::new(ReplayStore::new(root, ReplayMode::Replay), None).expect("replay needs no transport")
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn store(&self) -> &ReplayStore {
        &self.store
    }

    pub fn stats(&self) -> &CallStats {
        &self.stats
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        self.stats.requests[req.role.index()].fetch_add(1, Ordering::Relaxed);
        let fingerprint = req.fingerprint();

        if matches!(self.store.mode(), ReplayMode::Replay | ReplayMode::Record) {
            if let Some(record) = self.store.lookup(&fingerprint)? {
                self.stats.store_hits.fetch_add(1, Ordering::Relaxed);
                return Ok(ChatResponse { text: record.response, backend_id: "replay".into(), latency_ms: 0 });
            }
            if self.store.mode() == ReplayMode::Replay {
                return Err(GatewayError::ReplayMiss { fingerprint, role: req.role });
            }
        }

        let response = self.live_call(req)?;
        if self.store.mode() == ReplayMode::Record {
            self.store.persist(&RecordFile {
                fingerprint,
                request: req.envelope(),
                response: response.text.clone(),
            })?;
        }
        Ok(response)
    }

    fn live_call(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let transport = self.transport.as_ref().ok_or_else(|| GatewayError::NotConfigured("no transport".into()))?;
        let started = Instant::now();
        let text = self
            .retry
            .run(|| {
                self.stats.live.fetch_add(1, Ordering::Relaxed);
                transport.send(req)
            })
            .map_err(|e| GatewayError::Backend(e.to_string()))?;
        Ok(ChatResponse {
            text,
            backend_id: transport.backend_id().to_owned(),
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }
}

/// Chat-completions over HTTP.
///
/// POSTs `{"model", "messages", "temperature", "max_tokens"}` to the endpoint
/// and reads `choices[0].message.content` from the reply.
pub struct HttpTransport {
    endpoint: String,
    api_key: Option<String>,
    model: String,
    backend_id: String,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, model: impl Into<String>) -> Self {
        let endpoint = endpoint.into();
        let model = model.into();
        Self {
            backend_id: format!("{model}@{endpoint}"),
            endpoint,
            api_key,
            model,
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(120)).build(),
        }
    }

    pub fn from_env() -> Result<Self, GatewayError> {
        let endpoint = std::env::var(ENV_ENDPOINT)
            .map_err(|_| GatewayError::NotConfigured(format!("{ENV_ENDPOINT} is not set")))?;
        let model =
            std::env::var(ENV_MODEL).map_err(|_| GatewayError::NotConfigured(format!("{ENV_MODEL} is not set")))?;
        let api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        Ok(Self::new(endpoint, api_key, model))
    }
}

impl Transport for HttpTransport {
    fn backend_id(&self) -> &str {
        &self.backend_id
    }

    fn send(&self, req: &ChatRequest) -> Result<String, TransportError> {
        let mut messages = Vec::new();
        if let Some(system) = &req.system_text {
            messages.push(serde_json::json!({"role": "system", "content": system}));
        }
        messages.push(serde_json::json!({"role": "user", "content": req.user_text}));
        let body = serde_json::json!({
            "model": self.model,
            "messages": messages,
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        });
        let mut call = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            call = call.set("Authorization", &format!("Bearer {key}"));
        }
        match call.send_json(body) {
            Ok(resp) => {
                let value: serde_json::Value =
                    resp.into_json().map_err(|e| TransportError::Transient(format!("reading body: {e}")))?;
                value["choices"][0]["message"]["content"]
                    .as_str()
                    .map(str::to_owned)
                    .ok_or_else(|| TransportError::Fatal(format!("unexpected response shape: {value}")))
            }
            Err(ureq::Error::Status(code, resp)) => {
                let body = resp.into_string().unwrap_or_default();
                let msg = format!("HTTP {code}: {body}");
                if code == 429 || code >= 500 {
                    Err(TransportError::Transient(msg))
                } else {
                    Err(TransportError::Fatal(msg))
                }
            }
            Err(ureq::Error::Transport(t)) => Err(TransportError::Transient(t.to_string())),
        }
    }
}
