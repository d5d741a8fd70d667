//! Chat-completions client (`POST {base}/chat/completions`, reply in
//! `choices[0].message.content`).

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{ChatBackend, FinishReason, LmError, LmRequest, LmResponse};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpBackendConfig {
    pub name: String,
    pub base_url: String,
    #[serde(skip_serializing, default)]
    pub api_key: Option<String>,
    pub timeout: Duration,
}

impl HttpBackendConfig {
    /// Read `CIW_BASE_URL_<NAME>` / `CIW_API_KEY_<NAME>`, falling back to the
    /// unsuffixed `CIW_BASE_URL` / `CIW_API_KEY`.
    pub fn from_env(name: &str) -> Result<Self, LmError> {
        let base_url = env_lookup("CIW_BASE_URL", name).ok_or_else(|| {
            let suffix = env_suffix(name);
            LmError::InvalidRequest(format!("no base URL for backend {name:?}: set CIW_BASE_URL_{suffix} or CIW_BASE_URL"))
        })?;
        Ok(Self::with_base_url(name, base_url))
    }

    /// Explicit base URL; the API key still comes from the environment.
    pub fn with_base_url(name: &str, base_url: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            base_url: base_url.into(),
            api_key: env_lookup("CIW_API_KEY", name),
            timeout: Duration::from_secs(60),
        }
    }
}

fn env_suffix(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' })
        .collect()
}

fn env_lookup(var: &str, name: &str) -> Option<String> {
    std::env::var(format!("{var}_{}", env_suffix(name)))
        .or_else(|_| std::env::var(var))
        .ok()
        .filter(|v| !v.trim().is_empty())
}

pub struct HttpBackend {
    config: HttpBackendConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpBackendConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }
}

fn wire_body(request: &LmRequest) -> serde_json::Value {
    let mut body = json!({
        "model": request.model_id,
        "messages": request.messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    });
    if let Some(seed) = request.request_seed {
        body["seed"] = json!(seed);
    }
    body
}

fn classify_status(status: u16, body: String) -> LmError {
    match status {
        401 | 403 => LmError::Auth(body),
        402 => LmError::QuotaExhausted(body),
        429 if body.contains("insufficient_quota") || body.to_ascii_lowercase().contains("quota exceeded") => {
            LmError::QuotaExhausted(body)
        }
        408 | 409 | 429 | 500..=599 => LmError::Transient(format!("status {status}: {body}")),
        _ => LmError::Rejected { status, body },
    }
}

fn transport_error(err: ureq::Error) -> LmError {
    match err {
        ureq::Error::BadUri(uri) => LmError::InvalidRequest(format!("bad uri {uri}")),
        other => LmError::Transient(other.to_string()),
    }
}

/// Extract the completion from a chat-completions response body.
pub(crate) fn parse_completion(body: &str, fallback_model: &str, latency_ms: u64) -> Result<LmResponse, LmError> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| LmError::MalformedResponse(format!("{e}: {body}")))?;
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| LmError::MalformedResponse(format!("no choices in {body}")))?;
    let text = choice
        .pointer("/message/content")
        .and_then(|c| c.as_str())
        .ok_or_else(|| LmError::MalformedResponse(format!("no message content in {body}")))?
        .to_string();
    let finish_reason = match choice.get("finish_reason").and_then(|f| f.as_str()) {
        Some("stop") | None => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        Some(_) => FinishReason::Error,
    };
    if finish_reason == FinishReason::Stop && text.trim().is_empty() {
        return Err(LmError::MalformedResponse("empty completion with finish_reason stop".into()));
    }
    let model_id = value
        .get("model")
        .and_then(|m| m.as_str())
        .unwrap_or(fallback_model)
        .to_string();
    Ok(LmResponse {
        text,
        model_id,
        finish_reason,
        latency_ms,
    })
}

impl ChatBackend for HttpBackend {
    fn name(&self) -> &str {
        &self.config.name
    }

    fn complete(&self, request: &LmRequest) -> Result<LmResponse, LmError> {
        let started = Instant::now();
        let mut call = self
            .agent
            .post(&self.endpoint())
            .header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = call
            .send(wire_body(request).to_string())
            .map_err(transport_error)?;
        let status = response.status().as_u16();
        let body = response
            .body_mut()
            .read_to_string()
            .map_err(|e| LmError::Transient(format!("reading body: {e}")))?;
        if !(200..300).contains(&status) {
            return Err(classify_status(status, body));
        }
        parse_completion(&body, &request.model_id, started.elapsed().as_millis() as u64)
    }
}
