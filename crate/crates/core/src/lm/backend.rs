use std::time::Duration;

use parking_lot::{Condvar, Mutex};

use super::{LmError, LmRequest, LmResponse};

/// Anything that can turn a chat request into a completion.
pub trait ChatBackend: Send + Sync {
    fn name(&self) -> &str;

    fn complete(&self, request: &LmRequest) -> Result<LmResponse, LmError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    /// Total attempts, including the first one.
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    /// No sleeping between attempts; for tests and scripted backends.
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
            max_delay: Duration::ZERO,
        }
    }

    /// Delay before retry number `retry` (0-based): base * 2^retry, capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let factor = 1u32.checked_shl(retry).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }
}

/// Send with bounded retry and exponential backoff. Only transient
/// failures are retried; auth, quota and malformed bodies fail immediately.
pub fn send_chat(
    request: &LmRequest,
    backend: &dyn ChatBackend,
    policy: &RetryPolicy,
) -> Result<LmResponse, LmError> {
    let attempts = policy.max_attempts.max(1);
    let mut last = String::new();
    for attempt in 0..attempts {
        match backend.complete(request) {
            Ok(response) => {
                if attempt > 0 {
                    log::info!("{}: succeeded after {} retries", backend.name(), attempt);
                }
                return Ok(response);
            }
            Err(err) if err.is_retryable() => {
                last = err.to_string();
                if attempt + 1 < attempts {
                    let delay = policy.delay(attempt);
                    log::warn!(
                        "{}: attempt {}/{} failed ({err}); retrying in {:?}",
                        backend.name(),
                        attempt + 1,
                        attempts,
                        delay
                    );
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                }
            }
            Err(err) => return Err(err),
        }
    }
    Err(LmError::Transport { attempts, last })
}

/// Counting semaphore bounding concurrent backend calls.
#[derive(Debug)]
pub struct InFlightLimiter {
    limit: usize,
    active: Mutex<usize>,
    released: Condvar,
}

pub struct Permit<'a> {
    limiter: &'a InFlightLimiter,
}

impl InFlightLimiter {
    pub fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            active: Mutex::new(0),
            released: Condvar::new(),
        }
    }

    pub fn limit(&self) -> usize {
        self.limit
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock();
        while *active >= self.limit {
            self.released.wait(&mut active);
        }
        *active += 1;
        Permit { limiter: self }
    }

    pub fn in_flight(&self) -> usize {
        *self.active.lock()
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut active = self.limiter.active.lock();
        *active -= 1;
        self.limiter.released.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::mock::{FlakyBackend, ScriptedBackend};
    use crate::lm::{ChatMessage, LmRequest};
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    fn request() -> LmRequest {
        LmRequest::new("mock", vec![ChatMessage::user("x")])
    }

    #[test]
    fn mock_echo() {
        let backend = ScriptedBackend::fixed("Label: Background");
        let response = send_chat(&request(), &backend, &RetryPolicy::immediate(3)).unwrap();
        assert_eq!(response.text, "Label: Background");
    }

    #[test]
    fn fails_twice_then_succeeds_within_budget() {
        let backend = FlakyBackend::new(2, "Label: Basis");
        let response = send_chat(&request(), &backend, &RetryPolicy::immediate(3)).unwrap();
        assert_eq!(response.text, "Label: Basis");
        assert_eq!(backend.calls(), 3);
    }

    #[test]
    fn always_failing_exhausts_exactly_the_budget() {
        let backend = FlakyBackend::new(u32::MAX, "never");
        let err = send_chat(&request(), &backend, &RetryPolicy::immediate(3)).unwrap_err();
        assert!(matches!(err, LmError::Transport { attempts: 3, .. }), "{err}");
        assert_eq!(backend.calls(), 3);
    }

    #[test]
    fn non_transient_errors_are_not_retried() {
        for err in [
            LmError::Auth("bad key".into()),
            LmError::QuotaExhausted("monthly".into()),
            LmError::MalformedResponse("{".into()),
        ] {
            let expected = std::mem::discriminant(&err);
            let backend = ScriptedBackend::from_fn(move |_| Err(err.clone()));
            let got = send_chat(&request(), &backend, &RetryPolicy::immediate(5)).unwrap_err();
            assert_eq!(std::mem::discriminant(&got), expected);
            assert_eq!(backend.calls(), 1);
        }
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let policy = RetryPolicy {
            max_attempts: 10,
            base_delay: Duration::from_millis(100),
            max_delay: Duration::from_millis(500),
        };
        assert_eq!(policy.delay(0), Duration::from_millis(100));
        assert_eq!(policy.delay(1), Duration::from_millis(200));
        assert_eq!(policy.delay(2), Duration::from_millis(400));
        assert_eq!(policy.delay(3), Duration::from_millis(500));
        assert_eq!(policy.delay(40), Duration::from_millis(500));
    }

    #[test]
    fn limiter_bounds_concurrency() {
        let limiter = Arc::new(InFlightLimiter::new(3));
        let peak = Arc::new(AtomicUsize::new(0));
        std::thread::scope(|s| {
            for _ in 0..12 {
                let limiter = limiter.clone();
                let peak = peak.clone();
                s.spawn(move || {
                    let _p = limiter.acquire();
                    peak.fetch_max(limiter.in_flight(), Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 3);
        assert_eq!(limiter.in_flight(), 0);
    }
}
