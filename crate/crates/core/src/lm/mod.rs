//! Language-model access: request/response types, a chat-completions HTTP
//! client, scripted mocks and a record/replay cache.

use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

mod backend;
mod cache;
mod http;
pub mod mock;

pub use backend::{send_chat, ChatBackend, InFlightLimiter, RetryPolicy};
pub use cache::{cached_send, CacheEntry, ReplayCache};
pub use http::{HttpBackend, HttpBackendConfig};

pub const DEFAULT_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_MAX_TOKENS: u32 = 512;
pub const DEFAULT_MAX_IN_FLIGHT: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_seed: Option<u64>,
}

impl LmRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self {
            model_id: model_id.into(),
            messages,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            request_seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        let first = self
            .messages
            .first()
            .ok_or_else(|| LmError::InvalidRequest("request has no messages".into()))?;
        if first.role == Role::Assistant {
            return Err(LmError::InvalidRequest(
                "first message must be a system or user message".into(),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(LmError::InvalidRequest(format!(
                "temperature must be a non-negative real, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(LmError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Stable content digest; see [`request_digest`].
    pub fn digest(&self) -> String {
        request_digest(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmResponse {
    pub text: String,
    pub model_id: String,
    pub finish_reason: FinishReason,
    pub latency_ms: u64,
}

#[derive(Debug, Clone, Error)]
pub enum LmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("quota exhausted: {0}")]
    QuotaExhausted(String),
    #[error("malformed response body: {0}")]
    MalformedResponse(String),
    #[error("request rejected with status {status}: {body}")]
    Rejected { status: u16, body: String },
    /// A failure worth retrying (connection reset, timeout, 5xx, rate limit).
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("transport failed after {attempts} attempts: {last}")]
    Transport { attempts: u32, last: String },
    #[error("replay cache has no entry for digest {digest}")]
    CacheMiss { digest: String },
    #[error("cache i/o: {0}")]
    Cache(String),
}

impl LmError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, LmError::Transient(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LmMode {
    Record,
    #[default]
    Replay,
    Passthrough,
}

impl FromStr for LmMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "record" => Ok(LmMode::Record),
            "replay" => Ok(LmMode::Replay),
            "passthrough" => Ok(LmMode::Passthrough),
            other => Err(format!("unknown lm mode {other:?} (expected record, replay or passthrough)")),
        }
    }
}

impl std::fmt::Display for LmMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LmMode::Record => "record",
            LmMode::Replay => "replay",
            LmMode::Passthrough => "passthrough",
        })
    }
}

/// SHA-256 over the canonical JSON encoding of the request: object keys
/// sorted, no insignificant whitespace, absent `request_seed` omitted.
pub fn request_digest(request: &LmRequest) -> String {
    let canonical = canonical_json(request);
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

/// Digest of a request given in any JSON encoding of the request schema.
pub fn request_digest_from_json(encoded: &str) -> Result<String, serde_json::Error> {
    let request: LmRequest = serde_json::from_str(encoded)?;
    Ok(request_digest(&request))
}

pub(crate) fn canonical_json<T: Serialize>(value: &T) -> String {
    // serde_json's default map is ordered, so round-tripping through Value sorts keys.
    let value = serde_json::to_value(value).expect("request types always serialize");
    serde_json::to_string(&value).expect("json values always serialize")
}

/// Everything a pipeline stage needs to talk to one model: the backend,
/// retry and concurrency limits, the replay cache and the request defaults.
#[derive(Clone)]
pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    cache: Arc<ReplayCache>,
    mode: LmMode,
    retry: RetryPolicy,
    limiter: Arc<InFlightLimiter>,
    pub model_id: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Gateway {
    pub fn new(backend: Arc<dyn ChatBackend>, model_id: impl Into<String>) -> Self {
        Self {
            backend,
            cache: Arc::new(ReplayCache::in_memory()),
            mode: LmMode::Passthrough,
            retry: RetryPolicy::default(),
            limiter: Arc::new(InFlightLimiter::new(DEFAULT_MAX_IN_FLIGHT)),
            model_id: model_id.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn with_cache(mut self, cache: Arc<ReplayCache>, mode: LmMode) -> Self {
        self.cache = cache;
        self.mode = mode;
        self
    }

    pub fn with_mode(mut self, mode: LmMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, limit: usize) -> Self {
        self.limiter = Arc::new(InFlightLimiter::new(limit));
        self
    }

    pub fn mode(&self) -> LmMode {
        self.mode
    }

    pub fn cache(&self) -> &Arc<ReplayCache> {
        &self.cache
    }

    pub fn backend(&self) -> &Arc<dyn ChatBackend> {
        &self.backend
    }

    /// Build a request carrying this gateway's model and decoding defaults.
    pub fn request(&self, messages: Vec<ChatMessage>) -> LmRequest {
        LmRequest {
            model_id: self.model_id.clone(),
            messages,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            request_seed: None,
        }
    }

    pub fn send(&self, request: &LmRequest) -> Result<LmResponse, LmError> {
        request.validate()?;
        let limited = Limited {
            inner: self.backend.as_ref(),
            limiter: &self.limiter,
        };
        cached_send(request, &limited, &self.retry, &self.cache, self.mode)
    }
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("backend", &self.backend.name())
            .field("model_id", &self.model_id)
            .field("mode", &self.mode)
            .finish()
    }
}

struct Limited<'a> {
    inner: &'a dyn ChatBackend,
    limiter: &'a InFlightLimiter,
}

impl ChatBackend for Limited<'_> {
    fn name(&self) -> &str {
        self.inner.name()
    }

    fn complete(&self, request: &LmRequest) -> Result<LmResponse, LmError> {
        let _permit = self.limiter.acquire();
        self.inner.complete(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn request() -> LmRequest {
        LmRequest::new(
            "gemini-2.5-flash",
            vec![ChatMessage::system("classify"), ChatMessage::user("Atıf cümlesi [1].")],
        )
    }

    #[test]
    fn same_request_same_digest() {
        assert_eq!(request_digest(&request()), request_digest(&request()));
        assert_eq!(request_digest(&request()).len(), 64);
    }

    #[test]
    fn temperature_changes_digest() {
        let mut hot = request();
        hot.temperature = 0.7;
        assert_ne!(request_digest(&request()), request_digest(&hot));
    }

    #[test]
    fn every_field_is_digested() {
        let base = request_digest(&request());
        let mut r = request();
        r.model_id.push('x');
        assert_ne!(base, request_digest(&r));
        let mut r = request();
        r.max_tokens += 1;
        assert_ne!(base, request_digest(&r));
        let mut r = request();
        r.request_seed = Some(0);
        assert_ne!(base, request_digest(&r));
        let mut r = request();
        r.messages[1].content.push(' ');
        assert_ne!(base, request_digest(&r));
        let mut r = request();
        r.messages[1].role = Role::Assistant;
        assert_ne!(base, request_digest(&r));
    }

    #[test]
    fn canonically_equal_encodings_collide() {
        // Same request written by hand twice: different key order, whitespace,
        // explicit null seed versus an absent one.
        let a = r#"{"model_id":"m","messages":[{"role":"user","content":"hi"}],"temperature":0.0,"max_tokens":64}"#;
        let b = "{\n  \"max_tokens\": 64,\n  \"temperature\": 0,\n  \"request_seed\": null,\n  \"messages\": [ { \"content\": \"hi\", \"role\": \"user\" } ],\n  \"model_id\": \"m\"\n}\n";
        assert_eq!(
            request_digest_from_json(a).unwrap(),
            request_digest_from_json(b).unwrap()
        );
        let c = a.replace("\"hi\"", "\"hi \"");
        assert_ne!(
            request_digest_from_json(a).unwrap(),
            request_digest_from_json(&c).unwrap()
        );
    }

    #[test]
    fn no_collisions_across_generated_requests() {
        let mut seen = HashSet::new();
        for i in 0..1200u64 {
            let mut r = request();
            match i % 4 {
                0 => r.messages[1].content = format!("sentence {i}"),
                1 => r.request_seed = Some(i),
                2 => r.max_tokens = 1 + i as u32,
                _ => r.temperature = i as f64 / 1000.0,
            }
            assert!(seen.insert(request_digest(&r)), "collision at {i}");
        }
    }

    #[test]
    fn validation() {
        assert!(request().validate().is_ok());
        let mut r = request();
        r.messages.clear();
        assert!(r.validate().is_err());
        let mut r = request();
        r.messages.insert(0, ChatMessage::assistant("x"));
        assert!(r.validate().is_err());
        let mut r = request();
        r.temperature = -0.1;
        assert!(r.validate().is_err());
        let mut r = request();
        r.max_tokens = 0;
        assert!(r.validate().is_err());
    }

    proptest! {
        #[test]
        fn digest_survives_json_round_trip(content in ".*", temp in 0.0f64..2.0, seed in proptest::option::of(any::<u64>())) {
            let mut r = request();
            r.messages[1].content = content;
            r.temperature = temp;
            r.request_seed = seed;
            let pretty = serde_json::to_string_pretty(&r).unwrap();
            prop_assert_eq!(request_digest_from_json(&pretty).unwrap(), request_digest(&r));
        }
    }
}
