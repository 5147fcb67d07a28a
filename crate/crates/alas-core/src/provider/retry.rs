//! Bounded exponential backoff with jitter, driven by the error
//! classification table.

use super::{ClassificationTable, ErrorClass, ProviderError};
use crate::clock::Sleeper;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Duration;

#[derive(Clone, Debug, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    /// Relative jitter half-width; 0.2 means each delay is scaled by a
    /// uniform factor in [0.8, 1.2].
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            base_delay: Duration::from_secs(1),
            max_delay: Duration::from_secs(30),
            jitter: 0.2,
        }
    }
}

/// Delay before retry number `attempt` (1-based): the capped exponential
/// `min(base * 2^(attempt-1), max)` scaled by the jitter factor.
pub fn backoff_delay(policy: &RetryPolicy, attempt: u32, rng: &mut impl Rng) -> Duration {
    let exp = 2f64.powi(attempt.saturating_sub(1).min(62) as i32);
    let capped = (policy.base_delay.as_secs_f64() * exp).min(policy.max_delay.as_secs_f64());
    let factor = if policy.jitter > 0.0 {
        1.0 + rng.random_range(-policy.jitter..=policy.jitter)
    } else {
        1.0
    };
    Duration::from_secs_f64(capped * factor)
}

/// Runs `call`, retrying transient failures up to `policy.max_attempts` total
/// attempts. Permanent failures and exhausted budgets surface the last error.
pub fn with_retry<T>(
    policy: &RetryPolicy,
    table: &ClassificationTable,
    sleeper: &dyn Sleeper,
    seed: u64,
    mut call: impl FnMut() -> Result<T, ProviderError>,
) -> Result<T, ProviderError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut attempt = 1;
    loop {
        match call() {
            Ok(value) => return Ok(value),
            Err(error) => {
                if table.classify(&error) == ErrorClass::Permanent || attempt >= policy.max_attempts
                {
                    return Err(error);
                }
                sleeper.sleep(backoff_delay(policy, attempt, &mut rng));
                attempt += 1;
            }
        }
    }
}
