//! Chat-completion gateway: wire client, retries, audit logging, and a
//! deterministic mock for offline runs.
//!
//! The mock derives every reply from a SHA-256 digest of the seed and
//! the request, so identical requests always get identical replies and
//! whole pipeline runs are reproducible byte for byte. Replies are
//! shaped to fit the prompt being answered (summaries for summarization
//! prompts, JSON index arrays for filter prompts, and so on), including
//! occasionally malformed filter replies so the parsing fallbacks get
//! exercised without a live service.

pub mod prompts;

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::count_tokens;

/// A single chat-completion request.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model_tag: String,
}

impl ChatRequest {
    /// Request with the pipeline defaults: temperature 0, generous cap.
    pub fn new(user: impl Into<String>, model_tag: impl Into<String>) -> Self {
        ChatRequest {
            system: String::new(),
            user: user.into(),
            temperature: 0.0,
            max_tokens: 2048,
            model_tag: model_tag.into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Usage,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("rate limited (after retries)")]
    RateLimited,
    #[error("server error status {0}")]
    ServerStatus(u16),
    #[error("api error status {status}: {detail}")]
    ApiStatus { status: u16, detail: String },
    #[error("empty completion")]
    EmptyCompletion,
    #[error("audit log error: {0}")]
    Audit(String),
}

impl GatewayError {
    /// Transient failures worth retrying with backoff.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            GatewayError::Transport(_) | GatewayError::RateLimited | GatewayError::ServerStatus(_)
        )
    }
}

/// Retry schedule: exponential backoff, capped, no jitter so that runs
/// are reproducible.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 3, initial_delay_ms: 200, max_delay_ms: 5_000 }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based). Doubles each time
    /// up to the cap, so the schedule is non-decreasing.
    pub fn delay(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt).unwrap_or(u64::MAX);
        let ms = self.initial_delay_ms.saturating_mul(factor).min(self.max_delay_ms);
        Duration::from_millis(ms)
    }
}

/// One attempt against a concrete backend; retries live in [`Gateway`].
pub trait ChatBackend: Send + Sync {
    fn complete_once(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

/// Front door for all chat completions: validates requests, retries
/// transient failures, and appends request/response pairs to the audit
/// log when one is configured.
pub struct Gateway {
    backend: Box<dyn ChatBackend>,
    retry: RetryPolicy,
    audit: Option<Mutex<AuditWriter>>,
    parallelism: usize,
}

struct AuditWriter {
    file: std::fs::File,
    seq: u64,
}

#[derive(Serialize)]
struct AuditRecord<'a> {
    seq: u64,
    request: &'a ChatRequest,
    response: Option<&'a ChatResponse>,
    error: Option<String>,
}

impl Gateway {
    pub fn new(backend: Box<dyn ChatBackend>, retry: RetryPolicy) -> Self {
        Gateway { backend, retry, audit: None, parallelism: 1 }
    }

    /// Deterministic offline gateway.
    pub fn mock(seed: u64) -> Self {
        Gateway::new(Box::new(MockGateway::new(seed)), RetryPolicy::default())
    }

    /// Mock that replies with the same text to every request; handy for
    /// forcing specific parser paths in tests.
    pub fn fixed(reply: impl Into<String>) -> Self {
        Gateway::new(Box::new(MockGateway::fixed(reply)), RetryPolicy::default())
    }

    /// Mock that replays a scripted sequence of replies, then falls back
    /// to digest-derived ones.
    pub fn scripted(seed: u64, replies: Vec<String>) -> Self {
        Gateway::new(Box::new(MockGateway::scripted(seed, replies)), RetryPolicy::default())
    }

    /// Enables append-only JSONL audit logging.
    pub fn with_audit_log(mut self, path: &Path) -> Result<Self, GatewayError> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| GatewayError::Audit(e.to_string()))?;
        self.audit = Some(Mutex::new(AuditWriter { file, seq: 0 }));
        Ok(self)
    }

    /// Bounded number of in-flight requests callers should use.
    pub fn with_parallelism(mut self, parallelism: usize) -> Self {
        self.parallelism = parallelism.max(1);
        self
    }

    pub fn parallelism(&self) -> usize {
        self.parallelism
    }

    fn validate(req: &ChatRequest) -> Result<(), GatewayError> {
        if req.user.is_empty() {
            return Err(GatewayError::InvalidRequest("user content is empty".into()));
        }
        if !(0.0..=2.0).contains(&req.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                req.temperature
            )));
        }
        if req.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Completes a request, retrying transient failures per the policy.
    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        Self::validate(req)?;
        let mut attempt = 0u32;
        let outcome = loop {
            match self.backend.complete_once(req) {
                Ok(resp) => break Ok(resp),
                Err(e) if e.is_retryable() && attempt < self.retry.max_retries => {
                    log::warn!("gateway attempt {attempt} failed ({e}); retrying");
                    std::thread::sleep(self.retry.delay(attempt));
                    attempt += 1;
                }
                Err(e) => break Err(e),
            }
        };
        self.audit_log(req, &outcome)?;
        outcome
    }

    fn audit_log(
        &self,
        req: &ChatRequest,
        outcome: &Result<ChatResponse, GatewayError>,
    ) -> Result<(), GatewayError> {
        let Some(audit) = &self.audit else { return Ok(()) };
        let mut w = audit.lock().expect("audit lock");
        let record = AuditRecord {
            seq: w.seq,
            request: req,
            response: outcome.as_ref().ok(),
            error: outcome.as_ref().err().map(|e| e.to_string()),
        };
        let line = serde_json::to_string(&record).map_err(|e| GatewayError::Audit(e.to_string()))?;
        w.file
            .write_all(line.as_bytes())
            .and_then(|_| w.file.write_all(b"\n"))
            .map_err(|e| GatewayError::Audit(e.to_string()))?;
        w.seq += 1;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Mock backend

enum MockMode {
    /// Digest-derived replies shaped per prompt family.
    Auto,
    /// Same reply for every request.
    Fixed(String),
    /// Scripted replies first, digest-derived after exhaustion.
    Scripted(Mutex<VecDeque<String>>),
}

/// Deterministic offline chat backend.
pub struct MockGateway {
    seed: u64,
    mode: MockMode,
}

impl MockGateway {
    pub fn new(seed: u64) -> Self {
        MockGateway { seed, mode: MockMode::Auto }
    }

    pub fn fixed(reply: impl Into<String>) -> Self {
        MockGateway { seed: 0, mode: MockMode::Fixed(reply.into()) }
    }

    pub fn scripted(seed: u64, replies: Vec<String>) -> Self {
        MockGateway { seed, mode: MockMode::Scripted(Mutex::new(replies.into())) }
    }

    fn digest(&self, req: &ChatRequest) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update([0x1f]);
        h.update(req.system.as_bytes());
        h.update([0x1f]);
        h.update(req.user.as_bytes());
        h.update([0x1f]);
        h.update(req.model_tag.as_bytes());
        h.finalize().into()
    }

    fn auto_reply(&self, req: &ChatRequest) -> String {
        let digest = self.digest(req);
        let pick = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let tag = format!("{:02x}{:02x}{:02x}{:02x}", digest[0], digest[1], digest[2], digest[3]);
        let user = &req.user;

        if user.contains("Return only a JSON array") {
            // Mix of well-formed, salvageable, sentinel, and unparseable
            // replies so every filter path runs offline.
            return match pick % 8 {
                0 => "[0]".to_string(),
                1 => "[0,1]".to_string(),
                2 => "[1]".to_string(),
                3 => "[0,2]".to_string(),
                4 => "[-1]".to_string(),
                5 => "[0,1,2]".to_string(),
                6 => "Relevant indices: [0]".to_string(),
                _ => "The relevant passages are the first and third ones.".to_string(),
            };
        }
        if user.contains("one single letter") {
            return ["A", "B", "C", "D"][(pick % 4) as usize].to_string();
        }
        if user.contains("TRUE or FALSE") {
            let verdict = if pick % 2 == 0 { "TRUE" } else { "FALSE" };
            return format!(
                "<explanation>The statement follows from the mock context {tag}.</explanation>\n<answer>{verdict}</answer>"
            );
        }
        if user.contains("{\"answer\":\"x\"") || user.contains("detective fiction") {
            let letter = ["A", "B", "C", "D"][(pick % 4) as usize];
            return format!("{{\"answer\":\"{letter}\",\"reasoning\":\"mock deduction {tag}\"}}");
        }
        if user.contains("using a single phrase") {
            return format!("mock phrase {tag}");
        }
        if user.contains("summarize this chunk") {
            return format!(
                "Mock chunk summary {tag}: the passage is condensed while keeping its plot beats."
            );
        }
        if user.contains("concatenated text of summaries") {
            return format!("Mock global summary {tag}: the story arc condensed across all parts.");
        }
        if user.contains("one entity per line") {
            let pool = ["Alder", "Brook", "Corin", "Dale", "Ember", "Fenn"];
            let first = pool[(pick % 6) as usize];
            let second = pool[((pick / 6) % 6) as usize];
            if first == second {
                return format!("{first}: a recurring figure seen in segment {tag}");
            }
            return format!(
                "{first}: a recurring figure seen in segment {tag}\n{second}: a place described in segment {tag}"
            );
        }
        format!("Mock completion {tag}.")
    }
}

impl ChatBackend for MockGateway {
    fn complete_once(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let text = match &self.mode {
            MockMode::Auto => self.auto_reply(req),
            MockMode::Fixed(reply) => reply.clone(),
            MockMode::Scripted(queue) => {
                let mut q = queue.lock().expect("script lock");
                q.pop_front().unwrap_or_else(|| self.auto_reply(req))
            }
        };
        let usage = Usage {
            prompt_tokens: (count_tokens(&req.system) + count_tokens(&req.user)) as u64,
            completion_tokens: count_tokens(&text) as u64,
        };
        Ok(ChatResponse { text, usage })
    }
}

// ---------------------------------------------------------------------------
// HTTP backend (OpenAI-compatible chat completions)

/// Blocking HTTP client for an OpenAI-compatible `/chat/completions`
/// endpoint. Endpoint and key usually come from `MIA_API_BASE` and
/// `MIA_API_KEY`.
pub struct HttpGateway {
    base_url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireChatRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
}

#[derive(Deserialize, Default)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u64,
    #[serde(default)]
    completion_tokens: u64,
}

#[derive(Deserialize)]
struct WireChatResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

impl HttpGateway {
    pub fn new(base_url: impl Into<String>, api_key: Option<String>, timeout: Duration) -> Self {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .expect("reqwest client");
        HttpGateway { base_url: base_url.into(), api_key, client }
    }

    /// Reads endpoint and key from `MIA_API_BASE` / `MIA_API_KEY`.
    pub fn from_env() -> Result<Self, GatewayError> {
        let base = std::env::var("MIA_API_BASE").map_err(|_| {
            GatewayError::InvalidRequest("MIA_API_BASE not set for live gateway".into())
        })?;
        let key = std::env::var("MIA_API_KEY").ok();
        Ok(HttpGateway::new(base, key, Duration::from_secs(60)))
    }
}

impl ChatBackend for HttpGateway {
    fn complete_once(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let mut messages = Vec::new();
        if !req.system.is_empty() {
            messages.push(WireMessage { role: "system", content: &req.system });
        }
        messages.push(WireMessage { role: "user", content: &req.user });
        let body = WireChatRequest {
            model: &req.model_tag,
            messages,
            temperature: req.temperature,
            max_tokens: req.max_tokens,
        };
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let mut builder = self.client.post(&url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder.send().map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 {
            return Err(GatewayError::RateLimited);
        }
        if (500..600).contains(&status) {
            return Err(GatewayError::ServerStatus(status));
        }
        if !(200..300).contains(&status) {
            let detail = resp.text().unwrap_or_default().chars().take(200).collect();
            return Err(GatewayError::ApiStatus { status, detail });
        }
        let wire: WireChatResponse =
            resp.json().map_err(|e| GatewayError::Transport(e.to_string()))?;
        let text = wire
            .choices
            .first()
            .and_then(|c| c.message.content.clone())
            .unwrap_or_default();
        if text.is_empty() {
            return Err(GatewayError::EmptyCompletion);
        }
        let usage = wire.usage.unwrap_or_default();
        Ok(ChatResponse {
            text,
            usage: Usage {
                prompt_tokens: usage.prompt_tokens,
                completion_tokens: usage.completion_tokens,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write as IoWrite};
    use std::net::TcpListener;

    #[test]
    fn mock_is_deterministic_per_seed_and_request() {
        let gw = Gateway::mock(42);
        let req = ChatRequest::new("summarize this chunk please: <chunk>\nhello\n</chunk>", "m");
        let a = gw.complete(&req).unwrap();
        let b = gw.complete(&req).unwrap();
        assert_eq!(a.text, b.text);

        let other = Gateway::mock(43);
        let c = other.complete(&req).unwrap();
        assert_ne!(a.text, c.text, "different seeds should give different texts");
    }

    #[test]
    fn distinct_requests_get_distinct_tagged_texts() {
        let gw = Gateway::mock(7);
        let mut seen = std::collections::HashSet::new();
        for i in 0..50 {
            let req = ChatRequest::new(format!("summarize this chunk number {i}"), "m");
            let resp = gw.complete(&req).unwrap();
            assert!(seen.insert(resp.text), "digest-tagged replies must not collide");
        }
    }

    #[test]
    fn empty_user_is_rejected() {
        let gw = Gateway::mock(1);
        let req = ChatRequest::new("", "m");
        assert!(matches!(gw.complete(&req), Err(GatewayError::InvalidRequest(_))));
    }

    #[test]
    fn out_of_range_temperature_is_rejected() {
        let gw = Gateway::mock(1);
        let mut req = ChatRequest::new("hi", "m");
        req.temperature = 2.5;
        assert!(matches!(gw.complete(&req), Err(GatewayError::InvalidRequest(_))));
    }

    #[test]
    fn backoff_delays_are_non_decreasing_and_capped() {
        let p = RetryPolicy { max_retries: 10, initial_delay_ms: 100, max_delay_ms: 1_500 };
        let mut last = Duration::ZERO;
        for attempt in 0..12 {
            let d = p.delay(attempt);
            assert!(d >= last, "delay must not shrink");
            assert!(d <= Duration::from_millis(1_500));
            last = d;
        }
        assert_eq!(p.delay(0), Duration::from_millis(100));
        assert_eq!(p.delay(1), Duration::from_millis(200));
        assert_eq!(p.delay(4), Duration::from_millis(1_500));
    }

    #[test]
    fn audit_log_appends_one_line_per_completion() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit.jsonl");
        let gw = Gateway::mock(5).with_audit_log(&path).unwrap();
        gw.complete(&ChatRequest::new("first", "m")).unwrap();
        gw.complete(&ChatRequest::new("second", "m")).unwrap();
        let content = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = content.lines().collect();
        assert_eq!(lines.len(), 2);
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first["seq"], 0);
        assert_eq!(first["request"]["user"], "first");
        assert!(first["response"]["text"].is_string());
    }

    #[test]
    fn unreachable_endpoint_is_transport_error_after_retries() {
        // Port 1 on localhost refuses connections immediately.
        let backend = HttpGateway::new("http://127.0.0.1:1", None, Duration::from_millis(200));
        let retry = RetryPolicy { max_retries: 2, initial_delay_ms: 1, max_delay_ms: 2 };
        let gw = Gateway::new(Box::new(backend), retry);
        let err = gw.complete(&ChatRequest::new("hello", "m")).unwrap_err();
        assert!(matches!(err, GatewayError::Transport(_)), "got: {err}");
    }

    /// Answers `n` HTTP requests with the given canned bodies, one each.
    fn one_shot_server(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<()>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                // Drain the request headers + body enough to respond.
                let mut buf = [0u8; 8192];
                let _ = stream.read(&mut buf);
                let reason = if status == 200 { "OK" } else { "ERR" };
                let resp = format!(
                    "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(resp.as_bytes()).unwrap();
            }
        });
        (format!("http://{addr}"), handle)
    }

    #[test]
    fn http_gateway_parses_chat_completion() {
        let body = serde_json::json!({
            "choices": [{"message": {"role": "assistant", "content": "the answer"}}],
            "usage": {"prompt_tokens": 5, "completion_tokens": 2}
        })
        .to_string();
        let (base, handle) = one_shot_server(vec![(200, body)]);
        let gw = Gateway::new(
            Box::new(HttpGateway::new(base, Some("k".into()), Duration::from_secs(5))),
            RetryPolicy { max_retries: 0, initial_delay_ms: 1, max_delay_ms: 1 },
        );
        let resp = gw.complete(&ChatRequest::new("q", "model-x")).unwrap();
        assert_eq!(resp.text, "the answer");
        assert_eq!(resp.usage.prompt_tokens, 5);
        handle.join().unwrap();
    }

    #[test]
    fn http_gateway_retries_server_errors_then_succeeds() {
        let ok = serde_json::json!({
            "choices": [{"message": {"content": "recovered"}}]
        })
        .to_string();
        let (base, handle) =
            one_shot_server(vec![(500, "{}".into()), (200, ok)]);
        let gw = Gateway::new(
            Box::new(HttpGateway::new(base, None, Duration::from_secs(5))),
            RetryPolicy { max_retries: 3, initial_delay_ms: 1, max_delay_ms: 2 },
        );
        let resp = gw.complete(&ChatRequest::new("q", "m")).unwrap();
        assert_eq!(resp.text, "recovered");
        handle.join().unwrap();
    }

    #[test]
    fn filter_prompts_draw_from_the_canned_repertoire() {
        let gw = Gateway::mock(11);
        let mut families = std::collections::HashSet::new();
        for i in 0..64 {
            let req = ChatRequest::new(
                format!("Question {i}\nReturn only a JSON array of relevant chunk indices."),
                "m",
            );
            families.insert(gw.complete(&req).unwrap().text);
        }
        // All eight canned shapes should appear across enough draws.
        assert!(families.len() >= 6, "expected varied repertoire, got {families:?}");
        assert!(families.iter().any(|t| t == "[-1]"), "sentinel reply must be reachable");
        assert!(
            families.iter().any(|t| t.starts_with("Relevant indices")),
            "salvageable reply must be reachable"
        );
    }
}
