//! Token-bucket rate limiter with caller-supplied time, so tests can drive
//! it on a virtual clock.

use std::time::{Duration, Instant};

#[derive(Clone, Debug)]
pub struct TokenBucket {
    capacity: f64,
    fill_rate: f64,
    available: f64,
    last: Option<Instant>,
}

impl Default for TokenBucket {
    fn default() -> Self {
        TokenBucket::new(50.0, 10.0)
    }
}

impl TokenBucket {
    /// `capacity` is the burst size in requests, `fill_rate` the sustained
    /// requests per second.
    pub fn new(capacity: f64, fill_rate: f64) -> Self {
        assert!(capacity >= 1.0, "capacity must allow at least one request");
        assert!(fill_rate > 0.0, "fill rate must be positive");
        TokenBucket { capacity, fill_rate, available: capacity, last: None }
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn fill_rate(&self) -> f64 {
        self.fill_rate
    }

    /// Reserves one request slot. Returns how long the caller must wait
    /// before sending; zero when a token is immediately available. Waiting
    /// callers queue up, each pushed further back by the deficit the previous
    /// ones left behind.
    pub fn acquire(&mut self, now: Instant) -> Duration {
        if let Some(last) = self.last {
            let elapsed = now.saturating_duration_since(last).as_secs_f64();
            self.available = (self.available + elapsed * self.fill_rate).min(self.capacity);
        }
        self.last = Some(now);
        self.available -= 1.0;
        if self.available >= 0.0 {
            Duration::ZERO
        } else {
            Duration::from_secs_f64(-self.available / self.fill_rate)
        }
    }
}
