//! Deterministic in-process backends for tests and offline runs.

use std::sync::atomic::{AtomicU32, AtomicUsize, Ordering};

use super::{ChatBackend, FinishReason, LmError, LmRequest, LmResponse, Role};

type ReplyFn = dyn Fn(&LmRequest) -> Result<String, LmError> + Send + Sync;

/// Answers every request through a user-supplied script and counts calls.
pub struct ScriptedBackend {
    name: String,
    script: Box<ReplyFn>,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    pub fn from_fn<F>(script: F) -> Self
    where
        F: Fn(&LmRequest) -> Result<String, LmError> + Send + Sync + 'static,
    {
        Self {
            name: "scripted".to_string(),
            script: Box::new(script),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn fixed(reply: impl Into<String>) -> Self {
        let reply = reply.into();
        Self::from_fn(move |_| Ok(reply.clone()))
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for ScriptedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn complete(&self, request: &LmRequest) -> Result<LmResponse, LmError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let text = (self.script)(request)?;
        Ok(LmResponse {
            finish_reason: if text.is_empty() {
                FinishReason::Error
            } else {
                FinishReason::Stop
            },
            text,
            model_id: request.model_id.clone(),
            latency_ms: 0,
        })
    }
}

/// Fails with a transient error for the first `failures` calls, then answers `reply`.
pub struct FlakyBackend {
    failures: u32,
    reply: String,
    calls: AtomicU32,
}

impl FlakyBackend {
    pub fn new(failures: u32, reply: impl Into<String>) -> Self {
        Self {
            failures,
            reply: reply.into(),
            calls: AtomicU32::new(0),
        }
    }

    pub fn calls(&self) -> u32 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl ChatBackend for FlakyBackend {
    fn name(&self) -> &str {
        "flaky"
    }

    fn complete(&self, request: &LmRequest) -> Result<LmResponse, LmError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if n < self.failures {
            return Err(LmError::Transient(format!("scripted failure #{}", n + 1)));
        }
        Ok(LmResponse {
            text: self.reply.clone(),
            model_id: request.model_id.clone(),
            finish_reason: FinishReason::Stop,
            latency_ms: 0,
        })
    }
}

/// Refuses every call; stands in for "no network" in replay-only setups.
pub struct OfflineBackend;

impl ChatBackend for OfflineBackend {
    fn name(&self) -> &str {
        "offline"
    }

    fn complete(&self, _request: &LmRequest) -> Result<LmResponse, LmError> {
        Err(LmError::Auth("offline backend cannot reach any model".into()))
    }
}

/// Content of the last user message, i.e. the classification target.
pub fn target_text(request: &LmRequest) -> &str {
    request
        .messages
        .iter()
        .rev()
        .find(|m| m.role == Role::User)
        .map(|m| m.content.as_str())
        .unwrap_or("")
}

/// Number of demonstrations in an assembled prompt (one assistant turn each).
pub fn demo_count(request: &LmRequest) -> usize {
    request
        .messages
        .iter()
        .filter(|m| m.role == Role::Assistant)
        .count()
}

/// Content of the system message, if any.
pub fn system_text(request: &LmRequest) -> &str {
    request
        .messages
        .iter()
        .find(|m| m.role == Role::System)
        .map(|m| m.content.as_str())
        .unwrap_or("")
}

/// Bracketed reference marker such as `S00042` in `"... [S00042]."`, as used
/// by the synthetic datasets.
pub fn bracket_marker(text: &str) -> Option<&str> {
    let start = text.rfind('[')?;
    let end = start + text[start..].find(']')?;
    Some(&text[start + 1..end])
}

/// Stable pseudo-random number in [0, 1) derived from a string key (FNV-1a + mix).
pub fn unit_hash(key: &str) -> f64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in key.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51afd7ed558ccd);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Golden-ratio sequence value for `i`, in [0, 1). Thresholding it at `p`
/// marks almost exactly a fraction `p` of any run of consecutive integers,
/// which keeps scripted accuracies close to their nominal value.
pub fn equidistributed(i: u64) -> f64 {
    const PHI_FRAC: f64 = 0.618_033_988_749_894_9;
    (i as f64 * PHI_FRAC).fract()
}

/// Numeric part of a synthetic id such as `S00042`.
pub fn marker_number(marker: &str) -> Option<u64> {
    marker.trim_start_matches(|c: char| !c.is_ascii_digit()).parse().ok()
}
