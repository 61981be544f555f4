//! Obtaining raw model text for prompts.
//!
//! [`HttpBackend`] speaks the OpenAI-compatible chat completions protocol
//! (`POST {endpoint}/v1/chat/completions`), which hosted APIs and local
//! inference servers both accept. [`ReplayBackend`] serves canned responses
//! keyed by sample id, for deterministic runs.
//!
//! The API key is read from an environment variable (see
//! [`BackendConfig::api_key_env`]) and is never written to config, logs or
//! `Debug` output.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::jsonl::{self, JsonlError};
use crate::prompt::PromptLine;
use crate::rng::PortableRng;

pub const DEFAULT_API_KEY_ENV: &str = "SVI_API_KEY";
pub const CHAT_COMPLETIONS_PATH: &str = "/v1/chat/completions";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("request timed out")]
    Timeout,
    #[error("rate limited by server")]
    RateLimited,
    #[error("server returned status {0}")]
    ServerError(u16),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("no replay entry for sample {0:?}")]
    MissingReplayEntry(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    fn is_transient(&self) -> bool {
        match self {
            Self::Timeout | Self::RateLimited | Self::Transport(_) => true,
            Self::ServerError(s) => *s >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Replay,
}

/// Exponential backoff: `min(cap, initial * factor^retry)`, scaled by a
/// jitter factor in `[0.5, 1.0)` that is derived from the sample id and
/// retry number.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Backoff {
    #[serde(with = "millis")]
    pub initial: Duration,
    pub factor: f64,
    #[serde(with = "millis")]
    pub cap: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            initial: Duration::from_secs(1),
            factor: 2.0,
            cap: Duration::from_secs(30),
        }
    }
}

impl Backoff {
    pub fn delay(&self, sample_id: &str, retry: u32) -> Duration {
        let base = self.initial.as_secs_f64() * self.factor.powi(retry as i32);
        let capped = base.min(self.cap.as_secs_f64());
        let mut rng = PortableRng::keyed(u64::from(retry), sample_id);
        let jitter = 0.5 + (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64 * 0.5;
        Duration::from_secs_f64(capped * jitter)
    }
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    /// Keep going and report every failed sample.
    #[default]
    Collect,
    /// Stop dispatching new requests after the first failure.
    FailFast,
}

/// The API key is never part of this struct; it is read from the
/// environment variable named by `api_key_env`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model_name: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(with = "millis")]
    pub timeout: Duration,
    pub max_retries: u32,
    pub concurrency_limit: usize,
    pub api_key_env: String,
    pub backoff: Backoff,
    pub failure_mode: FailureMode,
    pub replay_file: Option<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Replay,
            endpoint: None,
            model_name: String::new(),
            temperature: 0.0,
            max_output_tokens: 64,
            timeout: Duration::from_secs(60),
            max_retries: 3,
            concurrency_limit: 4,
            api_key_env: DEFAULT_API_KEY_ENV.into(),
            backoff: Backoff::default(),
            failure_mode: FailureMode::Collect,
            replay_file: None,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        if self.concurrency_limit == 0 {
            return Err(BackendError::Config("concurrency_limit must be at least 1".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::Config("temperature must be >= 0".into()));
        }
        if self.kind == BackendKind::Http && self.endpoint.is_none() {
            return Err(BackendError::Config("http backend needs an endpoint".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPrediction {
    pub sample_id: String,
    pub raw_text: String,
    pub latency: Duration,
    pub attempt_count: u32,
}

/// On-disk form of a [`RawPrediction`]; also accepted as a replay file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawLine {
    pub id: String,
    pub raw: String,
    #[serde(default)]
    pub attempts: u32,
    #[serde(default)]
    pub latency_ms: u64,
}

impl From<&RawPrediction> for RawLine {
    fn from(p: &RawPrediction) -> Self {
        Self {
            id: p.sample_id.clone(),
            raw: p.raw_text.clone(),
            attempts: p.attempt_count,
            latency_ms: p.latency.as_millis() as u64,
        }
    }
}

pub trait Backend: Sync {
    fn query(&self, p: &PromptLine) -> Result<RawPrediction, BackendError>;
}

/// Canned responses keyed by sample id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReplayBackend {
    table: HashMap<String, String>,
}

#[derive(Deserialize)]
struct ReplayLine {
    id: String,
    raw: String,
}

impl ReplayBackend {
    pub fn new(table: HashMap<String, String>) -> Self {
        Self { table }
    }

    /// Later lines override earlier ones with the same id.
    pub fn from_jsonl_str(text: &str) -> Result<Self, JsonlError> {
        let lines: Vec<(usize, ReplayLine)> = jsonl::parse_str(text)?;
        Ok(Self {
            table: lines.into_iter().map(|(_, l)| (l.id, l.raw)).collect(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, JsonlError> {
        Self::from_jsonl_str(&jsonl::read_to_string(path)?)
    }
}

impl Backend for ReplayBackend {
    fn query(&self, p: &PromptLine) -> Result<RawPrediction, BackendError> {
        let raw = self
            .table
            .get(&p.id)
            .ok_or_else(|| BackendError::MissingReplayEntry(p.id.clone()))?;
        Ok(RawPrediction {
            sample_id: p.id.clone(),
            raw_text: raw.trim_end().to_string(),
            latency: Duration::ZERO,
            attempt_count: 1,
        })
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
    messages: [ChatMessage<'a>; 1],
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
}

#[derive(Deserialize)]
struct ChatReply {
    content: Option<String>,
}

/// Extracts `choices[0].message.content` from a chat completion body.
pub fn parse_chat_response(body: &str) -> Result<String, BackendError> {
    let resp: ChatResponse =
        serde_json::from_str(body).map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
    resp.choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::MalformedResponse("no choices".into()))?
        .message
        .content
        .ok_or_else(|| BackendError::MalformedResponse("choice has no content".into()))
}

pub struct HttpBackend {
    agent: ureq::Agent,
    url: String,
    model: String,
    temperature: f64,
    max_tokens: u32,
    api_key: Option<String>,
    max_retries: u32,
    backoff: Backoff,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend")
            .field("url", &self.url)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish_non_exhaustive()
    }
}

impl HttpBackend {
    pub fn new(cfg: &BackendConfig) -> Result<Self, BackendError> {
        cfg.validate()?;
        let endpoint = cfg
            .endpoint
            .as_deref()
            .ok_or_else(|| BackendError::Config("missing endpoint".into()))?;
        let base = endpoint.trim_end_matches('/');
        let url = if base.ends_with(CHAT_COMPLETIONS_PATH) {
            base.to_string()
        } else {
            format!("{base}{CHAT_COMPLETIONS_PATH}")
        };
        let agent = ureq::AgentBuilder::new()
            .timeout(cfg.timeout)
            .max_idle_connections_per_host(cfg.concurrency_limit)
            .build();
        Ok(Self {
            agent,
            url,
            model: cfg.model_name.clone(),
            temperature: cfg.temperature,
            max_tokens: cfg.max_output_tokens,
            api_key: std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty()),
            max_retries: cfg.max_retries,
            backoff: cfg.backoff,
        })
    }

    fn attempt(&self, prompt: &str) -> Result<String, BackendError> {
        let body = ChatRequest {
            model: &self.model,
            messages: [ChatMessage {
                role: "user",
                content: prompt,
            }],
            temperature: self.temperature,
            max_tokens: self.max_tokens,
        };
        let payload = serde_json::to_string(&body).expect("request serializes");
        let mut req = self.agent.post(&self.url).set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = req.send_string(&payload).map_err(classify)?;
        let text = resp.into_string().map_err(|e| io_error(&e))?;
        parse_chat_response(&text)
    }
}

fn io_error(e: &std::io::Error) -> BackendError {
    match e.kind() {
        std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock => BackendError::Timeout,
        _ => BackendError::Transport(e.to_string()),
    }
}

fn classify(err: ureq::Error) -> BackendError {
    match err {
        ureq::Error::Status(429, _) => BackendError::RateLimited,
        ureq::Error::Status(code, _) => BackendError::ServerError(code),
        ureq::Error::Transport(t) => {
            let io = std::error::Error::source(&t).and_then(|s| s.downcast_ref::<std::io::Error>());
            match io {
                Some(e) => io_error(e),
                None if t.to_string().contains("timed out") => BackendError::Timeout,
                None => BackendError::Transport(t.to_string()),
            }
        }
    }
}

impl Backend for HttpBackend {
    fn query(&self, p: &PromptLine) -> Result<RawPrediction, BackendError> {
        let start = Instant::now();
        let mut retry = 0;
        loop {
            match self.attempt(&p.prompt) {
                Ok(text) => {
                    return Ok(RawPrediction {
                        sample_id: p.id.clone(),
                        raw_text: text.trim_end().to_string(),
                        latency: start.elapsed(),
                        attempt_count: retry + 1,
                    })
                }
                Err(e) if e.is_transient() && retry < self.max_retries => {
                    std::thread::sleep(self.backoff.delay(&p.id, retry));
                    retry += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Builds the backend described by `cfg`.
pub fn from_config(cfg: &BackendConfig) -> Result<Box<dyn Backend>, BackendError> {
    cfg.validate()?;
    match cfg.kind {
        BackendKind::Http => Ok(Box::new(HttpBackend::new(cfg)?)),
        BackendKind::Replay => {
            let path = cfg
                .replay_file
                .as_deref()
                .ok_or_else(|| BackendError::Config("replay backend needs a replay file".into()))?;
            let replay = ReplayBackend::load(Path::new(path))
                .map_err(|e| BackendError::Config(e.to_string()))?;
            Ok(Box::new(replay))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{} of {total} queries failed (first: {}: {})", failures.len(), failures[0].0, failures[0].1)]
pub struct BatchError {
    pub total: usize,
    pub failures: Vec<(String, BackendError)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchOutput {
    /// Successful predictions in input order.
    pub predictions: Vec<RawPrediction>,
    /// Failed samples in input order.
    pub failures: Vec<(String, BackendError)>,
}

/// Queries every prompt with at most `concurrency_limit` requests in
/// flight. Results come back in input order regardless of completion order.
/// With [`FailureMode::FailFast`] any failure aborts the batch.
pub fn query_batch(
    backend: &dyn Backend,
    prompts: &[PromptLine],
    concurrency_limit: usize,
    mode: FailureMode,
) -> Result<BatchOutput, BatchError> {
    let workers = concurrency_limit.max(1).min(prompts.len().max(1));
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let slots: Mutex<Vec<Option<Result<RawPrediction, BackendError>>>> =
        Mutex::new(vec![None; prompts.len()]);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(p) = prompts.get(i) else { break };
                let r = backend.query(p);
                if r.is_err() && mode == FailureMode::FailFast {
                    stop.store(true, Ordering::SeqCst);
                }
                slots.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });

    let mut predictions = Vec::with_capacity(prompts.len());
    let mut failures = Vec::new();
    for (p, slot) in prompts.iter().zip(slots.into_inner().expect("no worker panicked")) {
        match slot {
            Some(Ok(r)) => predictions.push(r),
            Some(Err(e)) => failures.push((p.id.clone(), e)),
            None => {} // never dispatched after a fail-fast stop
        }
    }
    if mode == FailureMode::FailFast && !failures.is_empty() {
        return Err(BatchError {
            total: prompts.len(),
            failures,
        });
    }
    Ok(BatchOutput {
        predictions,
        failures,
    })
}
