//! Provider-agnostic chat-completion transport with retry, an in-flight
//! request gate, vendor adapters and record/replay cassettes.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::prompting::hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub model_id: String,
    pub max_output_tokens: u32,
    /// Identifies the call site (trial, side, tick) so that identical
    /// prompts in different repetitions map to different cassette entries.
    /// Never sent to a provider.
    pub trace_tag: String,
}

impl CompletionRequest {
    pub fn validate(&self) -> Result<(), TransportError> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(TransportError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.system_text.is_empty() || self.user_text.is_empty() {
            return Err(TransportError::InvalidRequest("empty prompt text".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON encoding of the request.
    pub fn digest(&self) -> String {
        let canonical = json!({
            "model_id": self.model_id,
            "system_text": self.system_text,
            "user_text": self.user_text,
            "temperature": self.temperature,
            "max_output_tokens": self.max_output_tokens,
            "trace_tag": self.trace_tag,
        });
        hex(&Sha256::digest(canonical.to_string().as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub raw_text: String,
    pub latency_s: f64,
    pub token_usage: TokenUsage,
    #[serde(default)]
    pub provider_metadata: BTreeMap<String, Value>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("rate limited")]
    RateLimited { retry_after: Option<Duration> },
    #[error("malformed provider payload: {0}")]
    Malformed(String),
    #[error("request rejected: {0}")]
    InvalidRequest(String),
    #[error("cassette miss for request digest {0}")]
    CacheMiss(String),
    #[error("cassette i/o: {0}")]
    Cassette(String),
}

impl TransportError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, TransportError::Transient(_) | TransportError::RateLimited { .. })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("giving up after {attempts} attempts: {last}")]
    RetryExhausted { attempts: u32, last: TransportError },
    #[error(transparent)]
    Fatal(TransportError),
}

/// A single request/response exchange with some backend.
pub trait Transport: Send + Sync {
    fn send(&self, request: &CompletionRequest) -> Result<CompletionResult, TransportError>;

    fn name(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    #[serde(with = "secs")]
    pub base_delay: Duration,
    #[serde(with = "secs")]
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    pub fn no_delay(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    /// Exponential backoff before attempt `attempt + 1` (1-based `attempt`).
    pub fn delay(&self, attempt: u32, hint: Option<Duration>) -> Duration {
        let exp = self
            .base_delay
            .saturating_mul(1u32.checked_shl(attempt.saturating_sub(1)).unwrap_or(u32::MAX));
        hint.unwrap_or(exp).min(self.max_delay)
    }
}

mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

/// Counting gate bounding the number of requests in flight.
#[derive(Debug)]
pub struct InFlightGate {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

pub struct GatePermit<'a> {
    gate: &'a InFlightGate,
}

impl InFlightGate {
    pub fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> GatePermit<'_> {
        let mut active = self.active.lock().expect("gate poisoned");
        while *active >= self.limit {
            active = self.freed.wait(active).expect("gate poisoned");
        }
        *active += 1;
        GatePermit { gate: self }
    }
}

impl Drop for GatePermit<'_> {
    fn drop(&mut self) {
        let mut active = self.gate.active.lock().expect("gate poisoned");
        *active -= 1;
        self.gate.freed.notify_one();
    }
}

/// Successful completion together with the number of attempts it took.
#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub result: CompletionResult,
    pub attempts: u32,
}

/// Shareable client: retry with backoff around a transport, behind an
/// in-flight gate.
pub struct LlmClient {
    transport: Arc<dyn Transport>,
    policy: RetryPolicy,
    gate: InFlightGate,
}

impl LlmClient {
    pub fn new(transport: Arc<dyn Transport>, policy: RetryPolicy, max_in_flight: usize) -> Self {
        Self {
            transport,
            policy,
            gate: InFlightGate::new(max_in_flight),
        }
    }

    pub fn transport_name(&self) -> String {
        self.transport.name()
    }

    pub fn complete(&self, request: &CompletionRequest) -> Result<Completion, ClientError> {
        request.validate().map_err(ClientError::Fatal)?;
        let max_attempts = self.policy.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            let started = Instant::now();
            let outcome = {
                let _permit = self.gate.acquire();
                self.transport.send(request)
            };
            let elapsed = started.elapsed().as_secs_f64();
            match outcome {
                Ok(mut result) => {
                    if result.latency_s == 0.0 {
                        result.latency_s = elapsed;
                    }
                    tracing::debug!(
                        transport = %self.transport.name(),
                        attempts = attempt,
                        latency_s = result.latency_s,
                        "completion ok"
                    );
                    return Ok(Completion {
                        result,
                        attempts: attempt,
                    });
                }
                Err(err) if err.is_retryable() && attempt < max_attempts => {
                    let hint = match &err {
                        TransportError::RateLimited { retry_after } => *retry_after,
                        _ => None,
                    };
                    let wait = self.policy.delay(attempt, hint);
                    tracing::warn!(attempt, error = %err, wait_s = wait.as_secs_f64(), "retrying completion");
                    if !wait.is_zero() {
                        std::thread::sleep(wait);
                    }
                }
                Err(err) if err.is_retryable() => {
                    return Err(ClientError::RetryExhausted {
                        attempts: attempt,
                        last: err,
                    })
                }
                Err(err) => return Err(ClientError::Fatal(err)),
            }
        }
    }
}

fn classify_status(status: u16, body: &str, retry_after: Option<Duration>) -> TransportError {
    match status {
        401 | 403 => TransportError::Auth(format!("HTTP {status}: {body}")),
        429 => TransportError::RateLimited { retry_after },
        408 | 500..=599 => TransportError::Transient(format!("HTTP {status}")),
        _ => TransportError::InvalidRequest(format!("HTTP {status}: {body}")),
    }
}

fn post_json(
    http: &reqwest::blocking::Client,
    url: &str,
    headers: &[(&str, &str)],
    body: &Value,
) -> Result<(Value, f64), TransportError> {
    let started = Instant::now();
    let mut req = http.post(url).json(body);
    for (k, v) in headers {
        req = req.header(*k, *v);
    }
    let resp = req.send().map_err(|e| TransportError::Transient(e.to_string()))?;
    let status = resp.status().as_u16();
    let retry_after = resp
        .headers()
        .get("retry-after")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<f64>().ok())
        .and_then(|s| Duration::try_from_secs_f64(s).ok());
    let text = resp.text().map_err(|e| TransportError::Transient(e.to_string()))?;
    if !(200..300).contains(&status) {
        return Err(classify_status(status, &text, retry_after));
    }
    let value: Value = serde_json::from_str(&text).map_err(|e| TransportError::Malformed(e.to_string()))?;
    Ok((value, started.elapsed().as_secs_f64()))
}

fn http_client() -> reqwest::blocking::Client {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(600))
        .build()
        .expect("HTTP client configuration is static")
}

/// OpenAI chat completions adapter. Key from `OPENAI_API_KEY`.
pub struct OpenAiTransport {
    api_key: String,
    base_url: String,
    http: reqwest::blocking::Client,
}

impl OpenAiTransport {
    pub const KEY_VAR: &'static str = "OPENAI_API_KEY";

    pub fn new(api_key: String, base_url: Option<String>) -> Self {
        Self {
            api_key,
            base_url: base_url.unwrap_or_else(|| "https://api.openai.com".into()),
            http: http_client(),
        }
    }

    pub fn from_env() -> Result<Self, TransportError> {
        let key = std::env::var(Self::KEY_VAR).map_err(|_| TransportError::Auth(format!("{} not set", Self::KEY_VAR)))?;
        Ok(Self::new(key, std::env::var("OPENAI_BASE_URL").ok()))
    }

    pub fn request_body(request: &CompletionRequest) -> Value {
        json!({
            "model": request.model_id,
            "messages": [
                {"role": "system", "content": request.system_text},
                {"role": "user", "content": request.user_text},
            ],
            "temperature": request.temperature,
            "max_completion_tokens": request.max_output_tokens,
        })
    }

    pub fn parse_body(body: &Value) -> Result<CompletionResult, TransportError> {
        let text = body
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| TransportError::Malformed("missing choices[0].message.content".into()))?;
        let usage = TokenUsage {
            prompt_tokens: body.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
            completion_tokens: body.pointer("/usage/completion_tokens").and_then(Value::as_u64).unwrap_or(0),
        };
        let mut meta = BTreeMap::new();
        for key in ["id", "model", "system_fingerprint"] {
            if let Some(v) = body.get(key) {
                meta.insert(key.to_string(), v.clone());
            }
        }
        if let Some(v) = body.pointer("/choices/0/finish_reason") {
            meta.insert("finish_reason".into(), v.clone());
        }
        Ok(CompletionResult {
            raw_text: text.to_string(),
            latency_s: 0.0,
            token_usage: usage,
            provider_metadata: meta,
        })
    }
}

impl Transport for OpenAiTransport {
    fn send(&self, request: &CompletionRequest) -> Result<CompletionResult, TransportError> {
        let url = format!("{}/v1/chat/completions", self.base_url.trim_end_matches('/'));
        let auth = format!("Bearer {}", self.api_key);
        let (body, latency) = post_json(&self.http, &url, &[("authorization", &auth)], &Self::request_body(request))?;
        let mut result = Self::parse_body(&body)?;
        result.latency_s = latency;
        Ok(result)
    }

    fn name(&self) -> String {
        "openai".into()
    }
}

/// Gemini `generateContent` adapter. Key from `GEMINI_API_KEY`.
pub struct GeminiTransport {
    api_key: String,
    base_url: String,
    http: reqwest::blocking::Client,
}

impl GeminiTransport {
    pub const KEY_VAR: &'static str = "GEMINI_API_KEY";

    pub fn new(api_key: String, base_url: Option<String>) -> Self {
        Self {
            api_key,
            base_url: base_url.unwrap_or_else(|| "https://generativelanguage.googleapis.com".into()),
            http: http_client(),
        }
    }

    pub fn from_env() -> Result<Self, TransportError> {
        let key = std::env::var(Self::KEY_VAR).map_err(|_| TransportError::Auth(format!("{} not set", Self::KEY_VAR)))?;
        Ok(Self::new(key, std::env::var("GEMINI_BASE_URL").ok()))
    }

    pub fn request_body(request: &CompletionRequest) -> Value {
        json!({
            "systemInstruction": {"parts": [{"text": request.system_text}]},
            "contents": [{"role": "user", "parts": [{"text": request.user_text}]}],
            "generationConfig": {
                "temperature": request.temperature,
                "maxOutputTokens": request.max_output_tokens,
            },
        })
    }

    pub fn parse_body(body: &Value) -> Result<CompletionResult, TransportError> {
        let parts = body
            .pointer("/candidates/0/content/parts")
            .and_then(Value::as_array)
            .ok_or_else(|| TransportError::Malformed("missing candidates[0].content.parts".into()))?;
        // Thought summaries, when present, are flagged and skipped.
        let text: String = parts
            .iter()
            .filter(|p| !p.get("thought").and_then(Value::as_bool).unwrap_or(false))
            .filter_map(|p| p.get("text").and_then(Value::as_str))
            .collect();
        let usage = TokenUsage {
            prompt_tokens: body.pointer("/usageMetadata/promptTokenCount").and_then(Value::as_u64).unwrap_or(0),
            completion_tokens: body
                .pointer("/usageMetadata/candidatesTokenCount")
                .and_then(Value::as_u64)
                .unwrap_or(0),
        };
        let mut meta = BTreeMap::new();
        for key in ["modelVersion", "responseId"] {
            if let Some(v) = body.get(key) {
                meta.insert(key.to_string(), v.clone());
            }
        }
        if let Some(v) = body.pointer("/candidates/0/finishReason") {
            meta.insert("finishReason".into(), v.clone());
        }
        Ok(CompletionResult {
            raw_text: text,
            latency_s: 0.0,
            token_usage: usage,
            provider_metadata: meta,
        })
    }
}

impl Transport for GeminiTransport {
    fn send(&self, request: &CompletionRequest) -> Result<CompletionResult, TransportError> {
        let url = format!(
            "{}/v1beta/models/{}:generateContent",
            self.base_url.trim_end_matches('/'),
            request.model_id
        );
        let (body, latency) =
            post_json(&self.http, &url, &[("x-goog-api-key", &self.api_key)], &Self::request_body(request))?;
        let mut result = Self::parse_body(&body)?;
        result.latency_s = latency;
        Ok(result)
    }

    fn name(&self) -> String {
        "gemini".into()
    }
}

/// Offline stand-in for a model: answers every request with a valid,
/// request-dependent constant plan so runs are deterministic.
#[derive(Debug, Clone)]
pub struct MockTransport {
    plan_len: usize,
}

impl MockTransport {
    pub fn new(plan_len: usize) -> Self {
        Self { plan_len }
    }
}

impl Transport for MockTransport {
    fn send(&self, request: &CompletionRequest) -> Result<CompletionResult, TransportError> {
        let digest = Sha256::digest(format!("{}\u{0}{}", request.user_text, request.trace_tag).as_bytes());
        // Constant plan in [-0.5, 0.5] with a 0.05 resolution.
        let level = (digest[0] % 21) as f64 * 0.05 - 0.5;
        let token = if level >= 0.0 { "M" } else { "Y" };
        let values = vec![format!("{level:.2}"); self.plan_len].join(", ");
        Ok(CompletionResult {
            raw_text: format!("{token}\nHolding a steady acceleration is enough here.\n```python\n[{values}]\n```"),
            latency_s: 0.0,
            token_usage: TokenUsage::default(),
            provider_metadata: BTreeMap::new(),
        })
    }

    fn name(&self) -> String {
        "mock".into()
    }
}

/// Serves a fixed sequence of outcomes, one per call; the last one repeats.
pub struct ScriptedTransport {
    script: Mutex<Vec<Result<String, TransportError>>>,
    calls: Mutex<usize>,
}

impl ScriptedTransport {
    pub fn new(script: Vec<Result<String, TransportError>>) -> Self {
        assert!(!script.is_empty(), "script must not be empty");
        Self {
            script: Mutex::new(script),
            calls: Mutex::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        *self.calls.lock().expect("poisoned")
    }
}

impl Transport for ScriptedTransport {
    fn send(&self, _request: &CompletionRequest) -> Result<CompletionResult, TransportError> {
        let mut calls = self.calls.lock().expect("poisoned");
        let script = self.script.lock().expect("poisoned");
        let item = script[(*calls).min(script.len() - 1)].clone();
        *calls += 1;
        item.map(|raw_text| CompletionResult {
            raw_text,
            latency_s: 0.0,
            token_usage: TokenUsage::default(),
            provider_metadata: BTreeMap::new(),
        })
    }

    fn name(&self) -> String {
        "scripted".into()
    }
}

/// One line of a cassette file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CassetteEntry {
    pub digest: String,
    pub model_id: String,
    pub trace_tag: String,
    pub result: CompletionResult,
}

/// Forwards to an inner transport and appends every success to a cassette.
pub struct RecordingTransport {
    inner: Arc<dyn Transport>,
    sink: Mutex<File>,
}

impl RecordingTransport {
    pub fn create(inner: Arc<dyn Transport>, path: &Path) -> Result<Self, TransportError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| TransportError::Cassette(format!("{}: {e}", path.display())))?;
        Ok(Self {
            inner,
            sink: Mutex::new(file),
        })
    }
}

impl Transport for RecordingTransport {
    fn send(&self, request: &CompletionRequest) -> Result<CompletionResult, TransportError> {
        let result = self.inner.send(request)?;
        let entry = CassetteEntry {
            digest: request.digest(),
            model_id: request.model_id.clone(),
            trace_tag: request.trace_tag.clone(),
            result: result.clone(),
        };
        let line = serde_json::to_string(&entry).map_err(|e| TransportError::Cassette(e.to_string()))?;
        let mut sink = self.sink.lock().expect("cassette writer poisoned");
        writeln!(sink, "{line}").map_err(|e| TransportError::Cassette(e.to_string()))?;
        Ok(result)
    }

    fn name(&self) -> String {
        format!("record({})", self.inner.name())
    }
}

/// Serves responses from a cassette by request digest. Holds no network
/// transport.
pub struct ReplayTransport {
    entries: HashMap<String, CassetteEntry>,
}

impl ReplayTransport {
    pub fn open(path: &Path) -> Result<Self, TransportError> {
        let file = File::open(path).map_err(|e| TransportError::Cassette(format!("{}: {e}", path.display())))?;
        let mut entries = HashMap::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| TransportError::Cassette(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: CassetteEntry = serde_json::from_str(&line)
                .map_err(|e| TransportError::Cassette(format!("line {}: {e}", n + 1)))?;
            entries.insert(entry.digest.clone(), entry);
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Transport for ReplayTransport {
    fn send(&self, request: &CompletionRequest) -> Result<CompletionResult, TransportError> {
        let digest = request.digest();
        self.entries
            .get(&digest)
            .map(|e| e.result.clone())
            .ok_or(TransportError::CacheMiss(digest))
    }

    fn name(&self) -> String {
        "replay".into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CassetteMode {
    Record,
    Replay,
}

/// Wraps `inner` for recording, or replaces it with a cassette reader.
/// In replay mode `inner` is never invoked.
pub fn record_and_replay(
    mode: CassetteMode,
    cassette: &Path,
    inner: impl FnOnce() -> Result<Arc<dyn Transport>, TransportError>,
) -> Result<Arc<dyn Transport>, TransportError> {
    match mode {
        CassetteMode::Record => Ok(Arc::new(RecordingTransport::create(inner()?, cassette)?)),
        CassetteMode::Replay => Ok(Arc::new(ReplayTransport::open(cassette)?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn request(user: &str) -> CompletionRequest {
        CompletionRequest {
            system_text: "sys".into(),
            user_text: user.into(),
            temperature: 1.0,
            model_id: "mock-1".into(),
            max_output_tokens: 512,
            trace_tag: "t".into(),
        }
    }

    fn failing(n: usize) -> ScriptedTransport {
        let mut script: Vec<Result<String, TransportError>> =
            (0..n).map(|_| Err(TransportError::Transient("503".into()))).collect();
        script.push(Ok("done".into()));
        ScriptedTransport::new(script)
    }

    #[test]
    fn canned_response_passes_through() {
        let t = Arc::new(ScriptedTransport::new(vec![Ok("hello".into())]));
        let client = LlmClient::new(t, RetryPolicy::no_delay(3), 1);
        let c = client.complete(&request("x")).unwrap();
        assert_eq!(c.result.raw_text, "hello");
        assert_eq!(c.attempts, 1);
    }

    #[test]
    fn retries_until_success_within_cap() {
        let t = Arc::new(failing(2));
        let client = LlmClient::new(t.clone(), RetryPolicy::no_delay(3), 1);
        let c = client.complete(&request("x")).unwrap();
        assert_eq!(c.attempts, 3);
        assert_eq!(t.calls(), 3);
    }

    #[test]
    fn retry_cap_exhausted() {
        let t = Arc::new(failing(4));
        let client = LlmClient::new(t.clone(), RetryPolicy::no_delay(3), 1);
        let err = client.complete(&request("x")).unwrap_err();
        assert!(matches!(err, ClientError::RetryExhausted { attempts: 3, .. }));
        assert_eq!(t.calls(), 3);
    }

    #[test]
    fn auth_failure_is_immediate() {
        let t = Arc::new(ScriptedTransport::new(vec![Err(TransportError::Auth("bad key".into()))]));
        let client = LlmClient::new(t.clone(), RetryPolicy::no_delay(5), 1);
        assert!(matches!(client.complete(&request("x")), Err(ClientError::Fatal(TransportError::Auth(_)))));
        assert_eq!(t.calls(), 1);
    }

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy {
            max_attempts: 10,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(700),
        };
        assert_eq!(p.delay(1, None), Duration::from_millis(100));
        assert_eq!(p.delay(3, None), Duration::from_millis(400));
        assert_eq!(p.delay(4, None), Duration::from_millis(700));
        assert_eq!(p.delay(1, Some(Duration::from_millis(250))), Duration::from_millis(250));
    }

    struct Counting {
        now: AtomicUsize,
        peak: AtomicUsize,
    }

    impl Transport for Counting {
        fn send(&self, r: &CompletionRequest) -> Result<CompletionResult, TransportError> {
            let n = self.now.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(n, Ordering::SeqCst);
            std::thread::sleep(Duration::from_millis(5));
            self.now.fetch_sub(1, Ordering::SeqCst);
            Ok(CompletionResult {
                raw_text: r.user_text.clone(),
                latency_s: 0.0,
                token_usage: TokenUsage::default(),
                provider_metadata: BTreeMap::new(),
            })
        }

        fn name(&self) -> String {
            "counting".into()
        }
    }

    #[test]
    fn in_flight_limit_is_respected() {
        let t = Arc::new(Counting {
            now: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let client = Arc::new(LlmClient::new(t.clone(), RetryPolicy::no_delay(1), 3));
        let handles: Vec<_> = (0..16)
            .map(|i| {
                let c = client.clone();
                std::thread::spawn(move || c.complete(&request(&format!("q{i}"))).unwrap())
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        let peak = t.peak.load(Ordering::SeqCst);
        assert!(peak <= 3 && peak >= 1, "peak {peak}");
    }

    #[test]
    fn adapters_carry_temperature_exactly() {
        let mut r = request("hi");
        r.temperature = 1.0;
        assert_eq!(OpenAiTransport::request_body(&r)["temperature"], json!(1.0));
        assert_eq!(GeminiTransport::request_body(&r)["generationConfig"]["temperature"], json!(1.0));
        assert!(OpenAiTransport::request_body(&r).get("trace_tag").is_none());
    }

    #[test]
    fn adapters_parse_payloads() {
        let body = json!({"id": "x", "choices": [{"message": {"content": "M\nok"}, "finish_reason": "stop"}],
                          "usage": {"prompt_tokens": 10, "completion_tokens": 3}});
        let r = OpenAiTransport::parse_body(&body).unwrap();
        assert_eq!(r.raw_text, "M\nok");
        assert_eq!(r.token_usage.completion_tokens, 3);
        assert!(OpenAiTransport::parse_body(&json!({"choices": []})).is_err());

        let body = json!({"candidates": [{"content": {"parts": [{"text": "plan", "thought": true}, {"text": "Y\n"}, {"text": "go"}]}}],
                          "usageMetadata": {"promptTokenCount": 7, "candidatesTokenCount": 2}});
        let r = GeminiTransport::parse_body(&body).unwrap();
        assert_eq!(r.raw_text, "Y\ngo");
        assert!(GeminiTransport::parse_body(&json!({})).is_err());
    }

    #[test]
    fn status_classification() {
        assert!(matches!(classify_status(401, "", None), TransportError::Auth(_)));
        assert!(classify_status(429, "", None).is_retryable());
        assert!(classify_status(503, "", None).is_retryable());
        assert!(!classify_status(400, "", None).is_retryable());
    }

    #[test]
    fn record_then_replay_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cassette.jsonl");
        let recorder = record_and_replay(CassetteMode::Record, &path, || {
            Ok(Arc::new(MockTransport::new(20)) as Arc<dyn Transport>)
        })
        .unwrap();
        let a = recorder.send(&request("one")).unwrap();
        let replay = record_and_replay(CassetteMode::Replay, &path, || panic!("network used in replay")).unwrap();
        assert_eq!(replay.send(&request("one")).unwrap().raw_text, a.raw_text);
        assert!(matches!(replay.send(&request("two")), Err(TransportError::CacheMiss(_))));
    }

    #[test]
    fn invalid_temperature_rejected() {
        let mut r = request("x");
        r.temperature = -0.1;
        let client = LlmClient::new(Arc::new(MockTransport::new(20)), RetryPolicy::no_delay(1), 1);
        assert!(matches!(client.complete(&r), Err(ClientError::Fatal(TransportError::InvalidRequest(_)))));
    }
}
