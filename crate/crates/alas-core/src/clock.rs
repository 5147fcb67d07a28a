//! Time and sleep injection. Tests pin a fixed clock so timestamps inside
//! hashed artifacts stay reproducible; retries take a no-op sleeper.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

pub trait Clock: Send + Sync {
    /// UTC ISO-8601 with seconds precision, e.g. `2026-01-01T00:00:00Z`.
    fn now_iso(&self) -> String;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_iso(&self) -> String {
        chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ").to_string()
    }
}

/// Always reports the same instant. The default value is an arbitrary fixed
/// date used throughout deterministic tests.
#[derive(Clone)]
pub struct FixedClock(pub String);

impl Default for FixedClock {
    fn default() -> Self {
        Self("2026-01-01T00:00:00Z".into())
    }
}

impl Clock for FixedClock {
    fn now_iso(&self) -> String {
        self.0.clone()
    }
}

pub trait Sleeper: Send + Sync {
    fn sleep(&self, d: Duration);
}

pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Records total requested sleep instead of blocking.
#[derive(Default)]
pub struct RecordingSleeper {
    total_micros: AtomicU64,
}

impl RecordingSleeper {
    pub fn total(&self) -> Duration {
        Duration::from_micros(self.total_micros.load(Ordering::SeqCst))
    }
}

impl Sleeper for RecordingSleeper {
    fn sleep(&self, d: Duration) {
        self.total_micros.fetch_add(d.as_micros() as u64, Ordering::SeqCst);
    }
}

pub type SharedClock = Arc<dyn Clock>;
pub type SharedSleeper = Arc<dyn Sleeper>;
