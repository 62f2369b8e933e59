//! Dispatching prompts to a chat-completion backend.
//!
//! Three backends sit behind [`Backend`]: [`HttpBackend`] for a live
//! endpoint, [`ReplayBackend`] answering from a recorded [`ReplayStore`],
//! and [`MockBackend`] for scripted responses. [`Gateway`] adds parameter
//! validation, retry with exponential backoff, recording, and bounded
//! batch concurrency on top.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompt::PromptBundle;

pub const BASE_URL_ENV: &str = "ADJUVANT_LLM_BASE_URL";
pub const API_KEY_ENV: &str = "ADJUVANT_LLM_API_KEY";
pub const DEFAULT_BASE_URL: &str = "https://api.openai.com/v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GatewayError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("rate limited by backend")]
    RateLimited,
    #[error("no recorded response for cache key {cache_key}")]
    BackendMismatch { cache_key: String },
    #[error("backend rejected request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    MalformedResponse(String),
    #[error("invalid model parameters: {0}")]
    InvalidParams(String),
    #[error("prompt is empty")]
    EmptyPrompt,
    #[error("replay store: {0}")]
    Store(String),
}

impl GatewayError {
    /// Worth retrying after a pause.
    pub fn is_transient(&self) -> bool {
        matches!(self, GatewayError::Transport(_) | GatewayError::RateLimited)
    }
}

/// Decoding and transport parameters for one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub model_name: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub request_timeout: Duration,
    pub max_retries: u32,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            model_name: "gpt-4o".to_owned(),
            temperature: 0.0001,
            max_tokens: 100,
            request_timeout: Duration::from_secs(60),
            max_retries: 3,
        }
    }
}

impl ModelParams {
    pub fn for_model(model_name: impl Into<String>) -> Self {
        Self {
            model_name: model_name.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::InvalidParams(format!(
                "temperature must be a finite value >= 0, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidParams("max_tokens must be >= 1".into()));
        }
        Ok(())
    }

    /// Serialization of the fields that change model output. Timeout and
    /// retry budget are transport concerns and stay out of the cache key.
    pub fn canonical(&self) -> String {
        format!(
            "model_name={}\ntemperature={:?}\nmax_tokens={}",
            self.model_name, self.temperature, self.max_tokens
        )
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 over the prompt, a NUL separator and the canonical parameters.
pub fn cache_key(prompt: &str, params: &ModelParams) -> String {
    let mut h = Sha256::new();
    h.update(prompt.as_bytes());
    h.update([0u8]);
    h.update(params.canonical().as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    Replay,
    Mock,
}

impl fmt::Display for BackendKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendKind::Live => "live",
            BackendKind::Replay => "replay",
            BackendKind::Mock => "mock",
        })
    }
}

impl FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "live" => Ok(BackendKind::Live),
            "replay" => Ok(BackendKind::Replay),
            "mock" => Ok(BackendKind::Mock),
            other => Err(format!("unknown backend {other:?} (expected live, replay or mock)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawResponse {
    pub text: String,
    pub backend: BackendKind,
    pub cache_key: String,
    pub latency: Duration,
    /// The backend stopped at the token cap.
    pub truncated: bool,
    /// Digest of the prompt as it left the process, when the backend can
    /// report it.
    pub sent_digest: Option<String>,
}

pub struct Request<'a> {
    pub bundle: &'a PromptBundle,
    pub params: &'a ModelParams,
    pub cache_key: &'a str,
    /// Which recorded response to replay when a prompt was sent more than
    /// once (one per experiment run).
    pub occurrence: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub truncated: bool,
    pub sent_digest: Option<String>,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            truncated: false,
            sent_digest: None,
        }
    }
}

pub trait Backend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn send(&self, request: &Request<'_>) -> Result<Completion, GatewayError>;
}

/// One line of the replay store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub cache_key: String,
    pub params: String,
    pub target_id: String,
    pub response: String,
    #[serde(default)]
    pub truncated: bool,
}

/// Append-only JSON-lines file of recorded responses, indexed by cache key.
pub struct ReplayStore {
    path: PathBuf,
    index: Mutex<HashMap<String, Vec<ReplayRecord>>>,
    file: Mutex<File>,
}

impl fmt::Debug for ReplayStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ReplayStore").field("path", &self.path).finish()
    }
}

impl ReplayStore {
    /// Open or create the store at `path`.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref().to_path_buf();
        let io = |e: std::io::Error| GatewayError::Store(format!("{}: {e}", path.display()));
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io)?;
        }
        let mut index: HashMap<String, Vec<ReplayRecord>> = HashMap::new();
        for record in read_records(&path)? {
            index.entry(record.cache_key.clone()).or_default().push(record);
        }
        let file = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
        Ok(Self {
            path,
            index: Mutex::new(index),
            file: Mutex::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, record: ReplayRecord) -> Result<(), GatewayError> {
        let line = serde_json::to_string(&record).map_err(|e| GatewayError::Store(e.to_string()))?;
        {
            let mut file = self.file.lock().unwrap();
            writeln!(file, "{line}")
                .and_then(|_| file.flush())
                .map_err(|e| GatewayError::Store(e.to_string()))?;
        }
        self.index
            .lock()
            .unwrap()
            .entry(record.cache_key.clone())
            .or_default()
            .push(record);
        Ok(())
    }

    /// The `occurrence`-th recording for `key`, falling back to the first.
    pub fn lookup(&self, key: &str, occurrence: usize) -> Option<ReplayRecord> {
        let index = self.index.lock().unwrap();
        let entries = index.get(key)?;
        entries.get(occurrence).or_else(|| entries.first()).cloned()
    }

    pub fn len(&self) -> usize {
        self.index.lock().unwrap().values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All records of a store file in file order. A missing file reads as
/// empty.
pub fn read_records(path: &Path) -> Result<Vec<ReplayRecord>, GatewayError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(GatewayError::Store(format!("{}: {e}", path.display()))),
    };
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| GatewayError::Store(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ReplayRecord = serde_json::from_str(&line).map_err(|e| {
            GatewayError::Store(format!("{} line {}: {e}", path.display(), n + 1))
        })?;
        out.push(record);
    }
    Ok(out)
}

pub struct ReplayBackend {
    store: Arc<ReplayStore>,
}

impl ReplayBackend {
    pub fn new(store: Arc<ReplayStore>) -> Self {
        Self { store }
    }
}

impl Backend for ReplayBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Replay
    }

    fn send(&self, request: &Request<'_>) -> Result<Completion, GatewayError> {
        let record = self
            .store
            .lookup(request.cache_key, request.occurrence)
            .ok_or_else(|| GatewayError::BackendMismatch {
                cache_key: request.cache_key.to_owned(),
            })?;
        Ok(Completion {
            text: record.response,
            truncated: record.truncated,
            sent_digest: None,
        })
    }
}

type Script = dyn Fn(&PromptBundle) -> Result<String, GatewayError> + Send + Sync;

/// Backend whose responses come from a closure.
pub struct MockBackend {
    script: Box<Script>,
}

impl MockBackend {
    pub fn new(
        script: impl Fn(&PromptBundle) -> Result<String, GatewayError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            script: Box::new(script),
        }
    }

    pub fn fixed(text: impl Into<String>) -> Self {
        let text = text.into();
        Self::new(move |_| Ok(text.clone()))
    }

    /// Responses keyed by target document id; unknown targets get
    /// `fallback`.
    pub fn scripted(responses: HashMap<String, String>, fallback: impl Into<String>) -> Self {
        let fallback = fallback.into();
        Self::new(move |b| {
            Ok(responses
                .get(&b.target_id)
                .cloned()
                .unwrap_or_else(|| fallback.clone()))
        })
    }
}

impl Backend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn send(&self, request: &Request<'_>) -> Result<Completion, GatewayError> {
        (self.script)(request.bundle).map(Completion::text)
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatReply,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChatReply {
    #[serde(default)]
    content: Option<String>,
}

/// Chat-completion endpoint over HTTP: `POST {base_url}/chat/completions`.
pub struct HttpBackend {
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
}

impl HttpBackend {
    pub fn new(
        base_url: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(Self {
            client,
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            api_key,
        })
    }

    /// Endpoint from `ADJUVANT_LLM_BASE_URL`, credential from
    /// `ADJUVANT_LLM_API_KEY`.
    pub fn from_env(timeout: Duration) -> Result<Self, GatewayError> {
        let base = std::env::var(BASE_URL_ENV).unwrap_or_else(|_| DEFAULT_BASE_URL.to_owned());
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        Self::new(base, key, timeout)
    }
}

impl Backend for HttpBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Live
    }

    fn send(&self, request: &Request<'_>) -> Result<Completion, GatewayError> {
        let body = serde_json::to_vec(&ChatRequest {
            model: &request.params.model_name,
            messages: vec![ChatMessage {
                role: "user",
                content: &request.bundle.text,
            }],
            temperature: request.params.temperature,
            max_tokens: request.params.max_tokens,
        })
        .map_err(|e| GatewayError::Transport(e.to_string()))?;

        // Digest of the content as serialized on the wire.
        let echoed: serde_json::Value =
            serde_json::from_slice(&body).map_err(|e| GatewayError::Transport(e.to_string()))?;
        let sent_digest = echoed["messages"][0]["content"]
            .as_str()
            .map(|c| sha256_hex(c.as_bytes()));

        let mut req = self
            .client
            .post(format!("{}/chat/completions", self.base_url))
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .timeout(request.params.request_timeout)
            .body(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;

        let status = resp.status().as_u16();
        let text = resp
            .text()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(GatewayError::Auth(text)),
            429 => return Err(GatewayError::RateLimited),
            500..=599 => return Err(GatewayError::Transport(format!("status {status}: {text}"))),
            _ => return Err(GatewayError::Rejected { status, body: text }),
        }

        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| GatewayError::MalformedResponse(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| GatewayError::MalformedResponse("no choices".into()))?;
        Ok(Completion {
            text: choice.message.content.unwrap_or_default(),
            truncated: choice.finish_reason.as_deref() == Some("length"),
            sent_digest,
        })
    }
}

/// Exponential backoff: `initial`, `initial * factor`, ...
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Backoff {
    pub initial: Duration,
    pub factor: u32,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            initial: Duration::from_secs(1),
            factor: 2,
        }
    }
}

impl Backoff {
    pub fn delay(&self, attempt: u32) -> Duration {
        self.initial * self.factor.saturating_pow(attempt)
    }
}

/// A backend plus retry, recording and batching. Cheap to share across
/// threads.
pub struct Gateway {
    backend: Arc<dyn Backend>,
    recorder: Option<Arc<ReplayStore>>,
    backoff: Backoff,
}

impl Gateway {
    pub fn new(backend: impl Backend + 'static) -> Self {
        Self::from_arc(Arc::new(backend))
    }

    pub fn from_arc(backend: Arc<dyn Backend>) -> Self {
        Self {
            backend,
            recorder: None,
            backoff: Backoff::default(),
        }
    }

    /// Append every non-replayed response to `store`.
    pub fn with_recorder(mut self, store: Arc<ReplayStore>) -> Self {
        self.recorder = Some(store);
        self
    }

    pub fn with_backoff(mut self, backoff: Backoff) -> Self {
        self.backoff = backoff;
        self
    }

    pub fn backend_kind(&self) -> BackendKind {
        self.backend.kind()
    }

    pub fn complete(&self, bundle: &PromptBundle, params: &ModelParams) -> Result<RawResponse, GatewayError> {
        self.complete_occurrence(bundle, params, 0)
    }

    pub fn complete_occurrence(
        &self,
        bundle: &PromptBundle,
        params: &ModelParams,
        occurrence: usize,
    ) -> Result<RawResponse, GatewayError> {
        params.validate()?;
        if bundle.text.is_empty() {
            return Err(GatewayError::EmptyPrompt);
        }
        let key = cache_key(&bundle.text, params);
        let request = Request {
            bundle,
            params,
            cache_key: &key,
            occurrence,
        };

        let started = Instant::now();
        let mut attempt = 0;
        let completion = loop {
            match self.backend.send(&request) {
                Ok(c) => break c,
                Err(e) if e.is_transient() && attempt < params.max_retries => {
                    let delay = self.backoff.delay(attempt);
                    tracing::warn!(target_id = %bundle.target_id, attempt, ?delay, error = %e, "retrying");
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        };
        let latency = started.elapsed();

        let backend = self.backend.kind();
        if let (Some(store), true) = (&self.recorder, backend != BackendKind::Replay) {
            store.append(ReplayRecord {
                cache_key: key.clone(),
                params: params.canonical(),
                target_id: bundle.target_id.clone(),
                response: completion.text.clone(),
                truncated: completion.truncated,
            })?;
        }

        Ok(RawResponse {
            text: completion.text,
            backend,
            cache_key: key,
            latency,
            truncated: completion.truncated,
            sent_digest: completion.sent_digest,
        })
    }

    pub fn run_batch(
        &self,
        bundles: &[PromptBundle],
        params: &ModelParams,
        concurrency_limit: usize,
    ) -> Vec<Result<RawResponse, GatewayError>> {
        self.run_batch_occurrence(bundles, params, concurrency_limit, 0)
    }

    /// Dispatch all bundles with at most `concurrency_limit` requests in
    /// flight. Output index `i` is the result for input `i`.
    pub fn run_batch_occurrence(
        &self,
        bundles: &[PromptBundle],
        params: &ModelParams,
        concurrency_limit: usize,
        occurrence: usize,
    ) -> Vec<Result<RawResponse, GatewayError>> {
        if bundles.is_empty() {
            return Vec::new();
        }
        let workers = concurrency_limit.max(1).min(bundles.len());
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<RawResponse, GatewayError>>>> =
            Mutex::new(vec![None; bundles.len()]);

        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(bundle) = bundles.get(i) else { break };
                    let result = self.complete_occurrence(bundle, params, occurrence);
                    slots.lock().unwrap()[i] = Some(result);
                });
            }
        });

        slots
            .into_inner()
            .unwrap()
            .into_iter()
            .map(|slot| slot.expect("every index is claimed by exactly one worker"))
            .collect()
    }
}
