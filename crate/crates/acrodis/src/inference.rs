//! Local-model backend abstraction.
//!
//! Two backends implement the same trait: an HTTP client for locally
//! hosted chat-completions servers and a deterministic mock for tests and
//! dry runs. A privacy guard refuses any endpoint whose host is not
//! loopback or a private/link-local address unless `force_remote` is set;
//! the refusal happens before any bytes leave the process.
//!
//! Outbound wire format (chat-completions style):
//!
//! ```text
//! POST <endpoint>
//! {"model":"...","messages":[{"role":"user","content":"<serialized prompt>"}],"temperature":0.0,"max_tokens":256}
//! ```
//!
//! The reply text is read from `choices[0].message.content`.

use std::collections::{BTreeMap, BTreeSet};
use std::net::IpAddr;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::corpus::{extract_acronyms, ExtractionRule};
use crate::prompting::{self, ParsedPrompt};

/// Connection settings for a locally hosted inference server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendConfig {
    /// Full chat-completions URL, e.g. `http://127.0.0.1:11434/v1/chat/completions`.
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub timeout_ms: u64,
    pub retries: u32,
    pub parallelism: usize,
    /// Permits non-private endpoints. Off by default; the privacy guard
    /// refuses to connect anywhere but loopback/LAN without it.
    pub force_remote: bool,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:11434/v1/chat/completions".to_owned(),
            model: String::new(),
            temperature: 0.0,
            max_tokens: 256,
            timeout_ms: 30_000,
            retries: 2,
            parallelism: 1,
            force_remote: false,
        }
    }
}

impl BackendConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }

    /// Loads TOML or JSON depending on the file extension (`.json` is
    /// JSON, everything else parses as TOML).
    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let body = std::fs::read_to_string(path).map_err(|e| BackendError::Config {
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            serde_json::from_str(&body).map_err(|e| BackendError::Config {
                message: format!("invalid JSON config {}: {e}", path.display()),
            })
        } else {
            toml::from_str(&body).map_err(|e| BackendError::Config {
                message: format!("invalid TOML config {}: {e}", path.display()),
            })
        }
    }

    /// Environment overrides: `<prefix>_ENDPOINT` and `<prefix>_MODEL`.
    pub fn apply_env_overrides(&mut self, prefix: &str) {
        if let Ok(endpoint) = std::env::var(format!("{prefix}_ENDPOINT")) {
            if !endpoint.is_empty() {
                self.endpoint = endpoint;
            }
        }
        if let Ok(model) = std::env::var(format!("{prefix}_MODEL")) {
            if !model.is_empty() {
                self.model = model;
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("endpoint host `{host}` is not a private address; pass --force-remote to override")]
    EndpointNotPrivate { host: String },
    #[error("invalid endpoint `{url}`: {reason}")]
    InvalidEndpoint { url: String, reason: String },
    #[error("request failed after {attempts} attempt(s): {last_error}")]
    Exhausted { attempts: u32, last_error: String },
    #[error("malformed server response: {0}")]
    BadResponse(String),
    #[error("backend configuration error: {message}")]
    Config { message: String },
    #[error("mock backend cannot answer prompt: {0}")]
    UnrecognizedPrompt(String),
}

/// One completed (or attempted) inference call.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionRecord {
    pub prompt: String,
    pub response: String,
    pub latency_ms: u64,
    pub attempt: u32,
    pub backend_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HealthStatus {
    Healthy,
    ModelUnavailable,
    Unreachable,
    RefusedByPrivacyGuard,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealthReport {
    pub status: HealthStatus,
    pub detail: String,
}

impl HealthReport {
    pub fn is_healthy(&self) -> bool {
        self.status == HealthStatus::Healthy
    }
}

/// A completion backend. `instance_key` identifies the corpus row for a
/// call; it is orchestration metadata and is never put on the wire.
pub trait Backend: Send + Sync {
    fn id(&self) -> &str;
    fn complete(&self, prompt: &str, instance_key: &str) -> Result<CompletionRecord, BackendError>;
    fn probe(&self) -> HealthReport;
    fn parallelism(&self) -> usize {
        1
    }
}

/// True for loopback, RFC1918, link-local, and IPv6 unique-local hosts,
/// plus the literal `localhost`. DNS names other than localhost are not
/// assumed private: they could resolve anywhere.
pub fn is_private_host(host: &str) -> bool {
    if host.eq_ignore_ascii_case("localhost") || host.to_ascii_lowercase().ends_with(".localhost")
    {
        return true;
    }
    match host.parse::<IpAddr>() {
        Ok(IpAddr::V4(ip)) => ip.is_loopback() || ip.is_private() || ip.is_link_local(),
        Ok(IpAddr::V6(ip)) => {
            ip.is_loopback()
                // fc00::/7 unique local, fe80::/10 link local
                || (ip.segments()[0] & 0xfe00) == 0xfc00
                || (ip.segments()[0] & 0xffc0) == 0xfe80
                || ip.to_ipv4_mapped().is_some_and(|v4| {
                    v4.is_loopback() || v4.is_private() || v4.is_link_local()
                })
        }
        Err(_) => false,
    }
}

/// Checks an endpoint URL against the privacy guard. Returns the parsed
/// host on success.
pub fn check_privacy_guard(endpoint: &str, force_remote: bool) -> Result<String, BackendError> {
    let url = url::Url::parse(endpoint).map_err(|e| BackendError::InvalidEndpoint {
        url: endpoint.to_owned(),
        reason: e.to_string(),
    })?;
    let host = url
        .host_str()
        .ok_or_else(|| BackendError::InvalidEndpoint {
            url: endpoint.to_owned(),
            reason: "no host component".to_owned(),
        })?
        .to_owned();
    if !force_remote && !is_private_host(&host) {
        return Err(BackendError::EndpointNotPrivate { host });
    }
    Ok(host)
}

#[derive(Debug, Serialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

/// Outbound request body; field order fixes the wire byte order.
#[derive(Debug, Serialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

#[derive(Debug)]
pub struct TransportError {
    pub message: String,
    /// Transport errors and timeouts are retried; HTTP status replies are not.
    pub retryable: bool,
    pub status: Option<u16>,
}

/// The protocol adapter under `HttpBackend`. Swap it to speak a different
/// local server dialect, or to observe traffic in tests.
pub trait Transport: Send + Sync {
    fn post_chat(&self, endpoint: &str, request: &ChatRequest) -> Result<String, TransportError>;
    fn get(&self, url: &str) -> Result<String, TransportError>;
}

struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    fn new(timeout: Duration) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self { agent }
    }

    fn classify(error: ureq::Error) -> TransportError {
        match error {
            ureq::Error::StatusCode(code) => TransportError {
                message: format!("server returned HTTP {code}"),
                retryable: false,
                status: Some(code),
            },
            other => TransportError {
                message: other.to_string(),
                retryable: true,
                status: None,
            },
        }
    }
}

impl Transport for UreqTransport {
    fn post_chat(&self, endpoint: &str, request: &ChatRequest) -> Result<String, TransportError> {
        // Compact one-line body; the wire bytes are part of the
        // documented interface.
        let body = serde_json::to_string(request).expect("request serializes");
        let mut response = self
            .agent
            .post(endpoint)
            .header("content-type", "application/json")
            .send(body.as_str())
            .map_err(Self::classify)?;
        response
            .body_mut()
            .read_to_string()
            .map_err(Self::classify)
    }

    fn get(&self, url: &str) -> Result<String, TransportError> {
        let mut response = self.agent.get(url).call().map_err(Self::classify)?;
        response
            .body_mut()
            .read_to_string()
            .map_err(Self::classify)
    }
}

/// HTTP client for a locally hosted chat-completions server. Retries
/// transport errors and timeouts with exponential backoff; never opens a
/// connection when the privacy guard refuses the endpoint.
pub struct HttpBackend {
    config: BackendConfig,
    transport: Box<dyn Transport>,
    backend_id: String,
    backoff_base: Duration,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Self {
        let transport = Box::new(UreqTransport::new(config.timeout()));
        Self::with_transport(config, transport)
    }

    /// Injects a custom protocol adapter (alternative local dialects,
    /// counting stubs in tests).
    pub fn with_transport(config: BackendConfig, transport: Box<dyn Transport>) -> Self {
        let backend_id = format!("{}@{}", config.model, config.endpoint);
        Self { config, transport, backend_id, backoff_base: Duration::from_millis(100) }
    }

    pub fn backoff_base(mut self, base: Duration) -> Self {
        self.backoff_base = base;
        self
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    fn guard(&self) -> Result<(), BackendError> {
        check_privacy_guard(&self.config.endpoint, self.config.force_remote).map(|_| ())
    }

    fn models_url(&self) -> String {
        match self.config.endpoint.strip_suffix("/chat/completions") {
            Some(base) => format!("{base}/models"),
            None => self.config.endpoint.clone(),
        }
    }
}

fn extract_content(body: &str) -> Result<String, BackendError> {
    let value: Value = serde_json::from_str(body)
        .map_err(|e| BackendError::BadResponse(format!("response is not JSON: {e}")))?;
    value["choices"][0]["message"]["content"]
        .as_str()
        .map(str::to_owned)
        .ok_or_else(|| {
            BackendError::BadResponse("missing choices[0].message.content".to_owned())
        })
}

impl Backend for HttpBackend {
    fn id(&self) -> &str {
        &self.backend_id
    }

    fn complete(&self, prompt: &str, _instance_key: &str) -> Result<CompletionRecord, BackendError> {
        self.guard()?;
        let request = ChatRequest {
            model: self.config.model.clone(),
            messages: vec![ChatMessage { role: "user".to_owned(), content: prompt.to_owned() }],
            temperature: self.config.temperature,
            max_tokens: self.config.max_tokens,
        };
        let started = Instant::now();
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            match self.transport.post_chat(&self.config.endpoint, &request) {
                Ok(body) => {
                    let response = extract_content(&body)?;
                    return Ok(CompletionRecord {
                        prompt: prompt.to_owned(),
                        response,
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempt,
                        backend_id: self.backend_id.clone(),
                    });
                }
                Err(error) if error.retryable && attempt <= self.config.retries => {
                    let backoff = self.backoff_base * 2u32.saturating_pow(attempt - 1);
                    std::thread::sleep(backoff.min(Duration::from_secs(2)));
                }
                Err(error) => {
                    return Err(BackendError::Exhausted {
                        attempts: attempt,
                        last_error: error.message,
                    });
                }
            }
        }
    }

    /// Checks reachability and, when the server exposes a model list,
    /// model availability. Sends no corpus text.
    fn probe(&self) -> HealthReport {
        if let Err(e) = self.guard() {
            return HealthReport { status: HealthStatus::RefusedByPrivacyGuard, detail: e.to_string() };
        }
        match self.transport.get(&self.models_url()) {
            Ok(body) => {
                let models: Option<Vec<String>> = serde_json::from_str::<Value>(&body)
                    .ok()
                    .and_then(|v| {
                        v["data"].as_array().map(|items| {
                            items
                                .iter()
                                .filter_map(|m| m["id"].as_str().map(str::to_owned))
                                .collect()
                        })
                    });
                match models {
                    Some(ids) if ids.iter().any(|id| id == &self.config.model) => HealthReport {
                        status: HealthStatus::Healthy,
                        detail: format!("model {} available", self.config.model),
                    },
                    Some(ids) => HealthReport {
                        status: HealthStatus::ModelUnavailable,
                        detail: format!(
                            "model {} not in server list [{}]",
                            self.config.model,
                            ids.join(", ")
                        ),
                    },
                    None => HealthReport {
                        status: HealthStatus::Healthy,
                        detail: "endpoint reachable; model list unavailable".to_owned(),
                    },
                }
            }
            Err(e) if e.status.is_some() => HealthReport {
                status: HealthStatus::Healthy,
                detail: format!("endpoint reachable; {}", e.message),
            },
            Err(e) => HealthReport { status: HealthStatus::Unreachable, detail: e.message },
        }
    }

    fn parallelism(&self) -> usize {
        self.config.parallelism.max(1)
    }
}

/// Convenience probe over a plain config.
pub fn probe(config: &BackendConfig) -> HealthReport {
    HttpBackend::new(config.clone()).probe()
}

/// Deterministic mock behavior. The corruption set is chosen up front
/// from the instance-id universe so a fixed seed corrupts the same rows
/// regardless of call order or concurrency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockBehavior {
    /// acronym -> expansion lookup used for expansion answers.
    pub dictionary: BTreeMap<String, String>,
    /// Fraction of instances to corrupt (wrong payload at confidence 0.98).
    pub error_rate: f64,
    pub seed: u64,
    /// Instance ids answered with an empty body (simulated guardrail block).
    pub block_ids: BTreeSet<String>,
}

impl MockBehavior {
    pub fn perfect(dictionary: BTreeMap<String, String>) -> Self {
        Self { dictionary, error_rate: 0.0, seed: 0, block_ids: BTreeSet::new() }
    }
}

/// The payload the mock emits for corrupted instances: a wrong acronym
/// and a wrong expansion, still with near-perfect confidence. This is the
/// overconfidence pathology calibration tests look for.
pub const MOCK_WRONG_ACRONYM: &str = "XXXX";
pub const MOCK_WRONG_EXPANSION: &str = "deliberately wrong mock expansion";
pub const MOCK_CONFIDENCE: f64 = 0.98;

pub struct MockBackend {
    behavior: MockBehavior,
    corrupted: BTreeSet<String>,
    rule: ExtractionRule,
    parallelism: usize,
    calls: AtomicUsize,
}

impl MockBackend {
    /// `instance_ids` is the id universe the seeded corruption set is
    /// drawn from; exactly `round(error_rate * n)` distinct ids are
    /// corrupted.
    pub fn new(behavior: MockBehavior, instance_ids: &[String]) -> Self {
        let corrupted = corruption_set(behavior.seed, behavior.error_rate, instance_ids);
        Self {
            behavior,
            corrupted,
            rule: ExtractionRule::default(),
            parallelism: 1,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism.max(1);
        self
    }

    pub fn corrupted_ids(&self) -> &BTreeSet<String> {
        &self.corrupted
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn expansion_payload(&self, acronym: &str, instance_key: &str) -> Value {
        if self.corrupted.contains(instance_key) {
            return serde_json::json!({
                "acronym": MOCK_WRONG_ACRONYM,
                "expansion": MOCK_WRONG_EXPANSION,
                "confidence": MOCK_CONFIDENCE,
                "rationale": "corrupted mock output",
            });
        }
        let expansion = self
            .behavior
            .dictionary
            .get(acronym)
            .cloned()
            .unwrap_or_else(|| "unknown".to_owned());
        serde_json::json!({
            "acronym": acronym,
            "expansion": expansion,
            "confidence": MOCK_CONFIDENCE,
            "rationale": "dictionary lookup",
        })
    }
}

/// Deterministic choice of exactly `round(error_rate * n)` ids: sort,
/// dedup, seeded shuffle, take the prefix.
pub fn corruption_set(seed: u64, error_rate: f64, instance_ids: &[String]) -> BTreeSet<String> {
    let mut ids: Vec<&String> = instance_ids.iter().collect();
    ids.sort();
    ids.dedup();
    let k = (error_rate * ids.len() as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    ids.into_iter().take(k.min(instance_ids.len())).cloned().collect()
}

impl Backend for MockBackend {
    fn id(&self) -> &str {
        "mock"
    }

    fn complete(&self, prompt: &str, instance_key: &str) -> Result<CompletionRecord, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let record = |response: String| CompletionRecord {
            prompt: prompt.to_owned(),
            response,
            latency_ms: 0,
            attempt: 1,
            backend_id: "mock".to_owned(),
        };

        if self.behavior.block_ids.contains(instance_key) {
            return Ok(record(String::new()));
        }

        let parsed: ParsedPrompt = prompting::parse_prompt(prompt)
            .ok_or_else(|| BackendError::UnrecognizedPrompt("prompt is not serialized JSON".to_owned()))?;

        let response = if parsed.task == prompting::CASCADED_DETECTION_TASK {
            serde_json::json!({ "acronyms": extract_acronyms(&parsed.text, &self.rule) })
        } else if parsed.task == prompting::ANNOTATION_TASK {
            let mut items = extract_acronyms(&parsed.text, &self.rule);
            // Equation-like whitespace tokens ("E=mc2") get listed too,
            // mirroring what the annotator pass is for.
            for token in parsed.text.split_whitespace() {
                let trimmed = token.trim_matches(|c: char| !c.is_alphanumeric() && c != '=');
                if trimmed.contains('=') && trimmed.len() > 1 && !items.iter().any(|i| i == trimmed)
                {
                    items.push(trimmed.to_owned());
                }
            }
            serde_json::json!({ "items": items })
        } else if parsed.task == prompting::SINGLE_PASS_TASK {
            let first = extract_acronyms(&parsed.text, &self.rule).into_iter().next();
            match first {
                Some(acronym) => self.expansion_payload(&acronym, instance_key),
                None => serde_json::json!({
                    "acronym": "",
                    "expansion": "",
                    "confidence": 0.0,
                    "rationale": "no acronym found",
                }),
            }
        } else if parsed.task == prompting::CASCADED_EXPANSION_TASK {
            let acronym = parsed.acronym.ok_or_else(|| {
                BackendError::UnrecognizedPrompt("expansion prompt without acronym slot".to_owned())
            })?;
            self.expansion_payload(&acronym, instance_key)
        } else {
            return Err(BackendError::UnrecognizedPrompt(format!(
                "unknown task `{}`",
                parsed.task
            )));
        };

        Ok(record(response.to_string()))
    }

    fn probe(&self) -> HealthReport {
        HealthReport { status: HealthStatus::Healthy, detail: "mock backend".to_owned() }
    }

    fn parallelism(&self) -> usize {
        self.parallelism
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Mutex;

    #[test]
    fn private_host_classification() {
        for host in [
            "localhost",
            "LOCALHOST",
            "myserver.localhost",
            "127.0.0.1",
            "127.8.8.8",
            "10.0.0.5",
            "172.16.3.2",
            "192.168.1.10",
            "169.254.0.3",
            "::1",
            "fc00::1",
            "fe80::2",
        ] {
            assert!(is_private_host(host), "{host} should be private");
        }
        for host in ["api.example.com", "8.8.8.8", "172.32.0.1", "2001:4860::8888", "example.lan"] {
            assert!(!is_private_host(host), "{host} should not be private");
        }
    }

    #[test]
    fn guard_refuses_public_endpoint_without_force() {
        let err = check_privacy_guard("https://api.example.com/v1/chat/completions", false)
            .unwrap_err();
        assert!(matches!(err, BackendError::EndpointNotPrivate { .. }));
        assert!(check_privacy_guard("https://api.example.com/v1/chat/completions", true).is_ok());
        assert!(check_privacy_guard("http://127.0.0.1:8080/v1/chat/completions", false).is_ok());
        assert!(matches!(
            check_privacy_guard("not a url", false),
            Err(BackendError::InvalidEndpoint { .. })
        ));
    }

    /// Counts every transport call; used to assert refusal-before-connect.
    pub struct CountingTransport {
        pub calls: std::sync::Arc<AtomicUsize>,
        pub script: Mutex<Vec<Result<String, TransportError>>>,
    }

    impl CountingTransport {
        pub fn scripted(script: Vec<Result<String, TransportError>>) -> Self {
            Self {
                calls: std::sync::Arc::new(AtomicUsize::new(0)),
                script: Mutex::new(script),
            }
        }
    }

    impl Transport for CountingTransport {
        fn post_chat(&self, _: &str, _: &ChatRequest) -> Result<String, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.script
                .lock()
                .unwrap()
                .pop()
                .unwrap_or_else(|| Err(TransportError {
                    message: "script exhausted".into(),
                    retryable: false,
                    status: None,
                }))
        }

        fn get(&self, _: &str) -> Result<String, TransportError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            Err(TransportError { message: "no get scripted".into(), retryable: false, status: None })
        }
    }

    fn chat_body(content: &str) -> String {
        serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": content}}]
        })
        .to_string()
    }

    #[test]
    fn complete_refuses_public_endpoint_before_any_transport_call() {
        let transport = CountingTransport::scripted(vec![Ok(chat_body("hi"))]);
        let calls = transport.calls.clone();
        let config = BackendConfig {
            endpoint: "https://api.example.com/v1/chat/completions".to_owned(),
            model: "m".to_owned(),
            ..Default::default()
        };
        let backend = HttpBackend::with_transport(config, Box::new(transport));
        let err = backend.complete("{}", "x").unwrap_err();
        assert!(matches!(err, BackendError::EndpointNotPrivate { .. }));
        // No bytes attempted.
        assert_eq!(calls.load(Ordering::SeqCst), 0);
        assert_eq!(backend.probe().status, HealthStatus::RefusedByPrivacyGuard);
        assert_eq!(calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn complete_retries_transport_errors_and_counts_attempts() {
        // Script is popped from the back: first call fails, second succeeds.
        let script = vec![
            Ok(chat_body("{\"ok\":true}")),
            Err(TransportError { message: "connection reset".into(), retryable: true, status: None }),
        ];
        let config = BackendConfig {
            endpoint: "http://127.0.0.1:9999/v1/chat/completions".to_owned(),
            model: "m".to_owned(),
            retries: 2,
            ..Default::default()
        };
        let backend = HttpBackend::with_transport(config, Box::new(CountingTransport::scripted(script)))
            .backoff_base(Duration::from_millis(1));
        let record = backend.complete("{}", "x").unwrap();
        assert_eq!(record.attempt, 2);
        assert_eq!(record.response, "{\"ok\":true}");
    }

    #[test]
    fn complete_exhausts_retries_with_last_cause() {
        let script = vec![
            Err(TransportError { message: "boom3".into(), retryable: true, status: None }),
            Err(TransportError { message: "boom2".into(), retryable: true, status: None }),
            Err(TransportError { message: "boom1".into(), retryable: true, status: None }),
        ];
        let config = BackendConfig {
            endpoint: "http://127.0.0.1:9999/v1/chat/completions".to_owned(),
            model: "m".to_owned(),
            retries: 2,
            ..Default::default()
        };
        let backend = HttpBackend::with_transport(config, Box::new(CountingTransport::scripted(script)))
            .backoff_base(Duration::from_millis(1));
        match backend.complete("{}", "x").unwrap_err() {
            BackendError::Exhausted { attempts, last_error } => {
                assert_eq!(attempts, 3);
                assert_eq!(last_error, "boom3");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn http_status_errors_are_not_retried() {
        let script = vec![
            Ok(chat_body("never reached")),
            Err(TransportError { message: "server returned HTTP 400".into(), retryable: false, status: Some(400) }),
        ];
        let config = BackendConfig {
            endpoint: "http://127.0.0.1:9999/v1/chat/completions".to_owned(),
            model: "m".to_owned(),
            retries: 3,
            ..Default::default()
        };
        let backend = HttpBackend::with_transport(config, Box::new(CountingTransport::scripted(script)))
            .backoff_base(Duration::from_millis(1));
        match backend.complete("{}", "x").unwrap_err() {
            BackendError::Exhausted { attempts, .. } => assert_eq!(attempts, 1),
            other => panic!("unexpected error {other}"),
        }
    }

    fn mini_ids() -> Vec<String> {
        (0..100).map(|i| format!("id{i:03}")).collect()
    }

    #[test]
    fn corruption_set_is_exact_and_stable() {
        let ids = mini_ids();
        let a = corruption_set(7, 0.25, &ids);
        assert_eq!(a.len(), 25);
        let b = corruption_set(7, 0.25, &ids);
        assert_eq!(a, b);
        // order of the universe must not matter
        let mut reversed = ids.clone();
        reversed.reverse();
        assert_eq!(corruption_set(7, 0.25, &reversed), a);
        // a different seed picks a different set (overwhelmingly likely)
        assert_ne!(corruption_set(8, 0.25, &ids), a);
    }

    fn dictionary() -> BTreeMap<String, String> {
        BTreeMap::from([
            ("PT".to_owned(), "prothrombin time".to_owned()),
            ("ED".to_owned(), "emergency department".to_owned()),
        ])
    }

    #[test]
    fn mock_answers_expansion_from_dictionary() {
        let ids = vec!["a".to_owned()];
        let mock = MockBackend::new(MockBehavior::perfect(dictionary()), &ids);
        let prompt = prompting::render_cascaded_expansion("PT was prolonged.", "PT").unwrap();
        let record = mock.complete(&prompt.text, "a").unwrap();
        let value: Value = serde_json::from_str(&record.response).unwrap();
        assert_eq!(value["expansion"], "prothrombin time");
        assert_eq!(value["confidence"], MOCK_CONFIDENCE);
    }

    #[test]
    fn mock_blocks_listed_ids_with_empty_body() {
        let ids = vec!["a".to_owned(), "b".to_owned()];
        let behavior = MockBehavior {
            block_ids: BTreeSet::from(["b".to_owned()]),
            ..MockBehavior::perfect(dictionary())
        };
        let mock = MockBackend::new(behavior, &ids);
        let prompt = prompting::render_cascaded_expansion("ED busy.", "ED").unwrap();
        assert_eq!(mock.complete(&prompt.text, "b").unwrap().response, "");
        assert_ne!(mock.complete(&prompt.text, "a").unwrap().response, "");
    }

    #[test]
    fn mock_detection_lists_rule_acronyms() {
        let mock = MockBackend::new(MockBehavior::perfect(dictionary()), &[]);
        let prompt = prompting::render_cascaded_detection("ED staff compared to SP .").unwrap();
        let record = mock.complete(&prompt.text, "a").unwrap();
        let value: Value = serde_json::from_str(&record.response).unwrap();
        assert_eq!(value["acronyms"], serde_json::json!(["ED", "SP"]));
    }

    #[test]
    fn mock_is_deterministic_across_call_order() {
        let ids: Vec<String> = (0..10).map(|i| format!("i{i}")).collect();
        let behavior = MockBehavior { error_rate: 0.3, seed: 42, ..MockBehavior::perfect(dictionary()) };
        let mock_a = MockBackend::new(behavior.clone(), &ids);
        let mock_b = MockBackend::new(behavior, &ids);
        let prompt = prompting::render_cascaded_expansion("PT checked.", "PT").unwrap();
        let mut first: Vec<String> = Vec::new();
        for id in &ids {
            first.push(mock_a.complete(&prompt.text, id).unwrap().response);
        }
        for (id, expected) in ids.iter().zip(&first).rev() {
            assert_eq!(&mock_b.complete(&prompt.text, id).unwrap().response, expected);
        }
    }

    #[test]
    fn config_file_and_env_overrides() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backend.toml");
        std::fs::write(
            &path,
            "endpoint = \"http://127.0.0.1:8080/v1/chat/completions\"\nmodel = \"gemma\"\nretries = 5\n",
        )
        .unwrap();
        let mut config = BackendConfig::from_file(&path).unwrap();
        assert_eq!(config.model, "gemma");
        assert_eq!(config.retries, 5);
        assert_eq!(config.temperature, 0.0);

        std::env::set_var("ACRODIS_TEST_MODEL", "llama");
        config.apply_env_overrides("ACRODIS_TEST");
        assert_eq!(config.model, "llama");
        std::env::remove_var("ACRODIS_TEST_MODEL");

        let json_path = dir.path().join("backend.json");
        std::fs::write(&json_path, r#"{"endpoint":"http://localhost:1/","model":"x"}"#).unwrap();
        assert_eq!(BackendConfig::from_file(&json_path).unwrap().model, "x");
    }
}
