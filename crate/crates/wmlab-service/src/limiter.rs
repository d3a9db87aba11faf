//! Per-client token-bucket rate limiting over an injectable monotone
//! clock, so tests can replay timing scenarios without sleeping.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use wmlab::error::{Error, Result};

/// Monotone time source since an arbitrary epoch.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
}

pub struct MonotonicClock {
    start: Instant,
}

impl MonotonicClock {
    pub fn new() -> Self {
        Self { start: Instant::now() }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> Duration {
        self.start.elapsed()
    }
}

/// Hand-advanced clock for deterministic tests.
pub struct ManualClock(Mutex<Duration>);

impl ManualClock {
    pub fn new() -> Self {
        Self(Mutex::new(Duration::ZERO))
    }

    pub fn advance(&self, d: Duration) {
        *self.0.lock().unwrap() += d;
    }
}

impl Default for ManualClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        *self.0.lock().unwrap()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RateDecision {
    Allowed,
    /// Seconds until one request's worth of budget refills.
    Denied { retry_after: f64 },
}

struct Bucket {
    tokens: f64,
    last: Duration,
}

/// Classic token bucket, one bucket per client id. Buckets start full, so
/// a fresh client gets exactly `capacity` instant requests before the
/// refill rate takes over.
pub struct RateLimiter {
    capacity: u32,
    refill_per_second: f64,
    clock: Arc<dyn Clock>,
    buckets: Mutex<HashMap<String, Bucket>>,
}

impl RateLimiter {
    pub fn new(capacity: u32, refill_per_second: f64, clock: Arc<dyn Clock>) -> Result<Self> {
        if capacity < 1 {
            return Err(Error::InvalidParameter("rate-limit capacity must be at least 1".into()));
        }
        if !(refill_per_second > 0.0 && refill_per_second.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "refill rate must be positive and finite, got {refill_per_second}"
            )));
        }
        Ok(Self { capacity, refill_per_second, clock, buckets: Mutex::new(HashMap::new()) })
    }

    pub fn capacity(&self) -> u32 {
        self.capacity
    }

    pub fn refill_per_second(&self) -> f64 {
        self.refill_per_second
    }

    /// Spends one request from the client's bucket, or reports how long
    /// the client must wait. One client's spending never touches another
    /// client's bucket.
    pub fn check(&self, client: &str) -> RateDecision {
        let now = self.clock.now();
        let mut buckets = self.buckets.lock().unwrap();
        let bucket = buckets
            .entry(client.to_string())
            .or_insert(Bucket { tokens: self.capacity as f64, last: now });
        let dt = now.saturating_sub(bucket.last).as_secs_f64();
        bucket.tokens = (bucket.tokens + dt * self.refill_per_second).min(self.capacity as f64);
        bucket.last = now;
        if bucket.tokens >= 1.0 {
            bucket.tokens -= 1.0;
            RateDecision::Allowed
        } else {
            RateDecision::Denied {
                retry_after: (1.0 - bucket.tokens) / self.refill_per_second,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn limiter(capacity: u32, rate: f64) -> (RateLimiter, Arc<ManualClock>) {
        let clock = Arc::new(ManualClock::new());
        let limiter = RateLimiter::new(capacity, rate, clock.clone()).unwrap();
        (limiter, clock)
    }

    #[test]
    fn capacity_plus_first_request_is_denied_exactly() {
        let (limiter, _clock) = limiter(10, 2.0);
        for i in 0..10 {
            assert_eq!(limiter.check("a"), RateDecision::Allowed, "request {i}");
        }
        match limiter.check("a") {
            RateDecision::Denied { retry_after } => {
                assert!((retry_after - 0.5).abs() < 1e-9, "retry_after {retry_after}")
            }
            RateDecision::Allowed => panic!("11th instant request must be denied"),
        }
    }

    #[test]
    fn one_full_refill_window_restores_the_bucket() {
        let (limiter, clock) = limiter(10, 2.0);
        for _ in 0..10 {
            assert_eq!(limiter.check("a"), RateDecision::Allowed);
        }
        assert!(matches!(limiter.check("a"), RateDecision::Denied { .. }));
        clock.advance(Duration::from_secs(5));
        for i in 0..10 {
            assert_eq!(limiter.check("a"), RateDecision::Allowed, "post-refill request {i}");
        }
        assert!(matches!(limiter.check("a"), RateDecision::Denied { .. }));
    }

    #[test]
    fn clients_have_independent_budgets() {
        let (limiter, _clock) = limiter(3, 1.0);
        for _ in 0..3 {
            assert_eq!(limiter.check("a"), RateDecision::Allowed);
        }
        assert!(matches!(limiter.check("a"), RateDecision::Denied { .. }));
        for i in 0..3 {
            assert_eq!(limiter.check("b"), RateDecision::Allowed, "client b request {i}");
        }
    }

    #[test]
    fn partial_refill_grants_partial_budget() {
        let (limiter, clock) = limiter(4, 2.0);
        for _ in 0..4 {
            assert_eq!(limiter.check("a"), RateDecision::Allowed);
        }
        clock.advance(Duration::from_millis(500));
        assert_eq!(limiter.check("a"), RateDecision::Allowed, "one token refilled");
        assert!(matches!(limiter.check("a"), RateDecision::Denied { .. }));
    }

    #[test]
    fn rejects_degenerate_parameters() {
        let clock: Arc<dyn Clock> = Arc::new(ManualClock::new());
        assert!(RateLimiter::new(0, 1.0, clock.clone()).is_err());
        assert!(RateLimiter::new(5, 0.0, clock.clone()).is_err());
        assert!(RateLimiter::new(5, f64::NAN, clock).is_err());
    }
}
