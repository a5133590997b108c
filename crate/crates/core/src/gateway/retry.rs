use std::time::Duration;

use rand::Rng;

use super::GatewayError;

/// Exponential backoff with multiplicative jitter.
#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
    /// Relative jitter; 0.2 spreads each delay over ±20%.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            max_delay: Duration::from_secs(30),
            jitter: 0.2,
        }
    }
}

/// Outcome of one failed attempt.
#[derive(Debug)]
pub enum AttemptError {
    Retryable {
        reason: String,
        retry_after: Option<Duration>,
        rate_limited: bool,
    },
    Fatal(GatewayError),
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based), for a jitter sample in [-1, 1].
    pub fn delay(&self, retry: u32, jitter_sample: f64) -> Duration {
        let exp = self
            .base_delay
            .saturating_mul(2u32.saturating_pow(retry.min(31)))
            .min(self.max_delay);
        let factor = 1.0 + self.jitter * jitter_sample.clamp(-1.0, 1.0);
        exp.mul_f64(factor.max(0.0))
    }

    /// Upper bound on the total time spent sleeping across all retries.
    pub fn max_total_delay(&self) -> Duration {
        let per_retry = self.max_delay.mul_f64(1.0 + self.jitter.max(0.0));
        per_retry.saturating_mul(self.max_attempts.saturating_sub(1))
    }

    /// Runs `op` until it succeeds, fails fatally, or attempts run out.
    /// `sleep` is called between attempts.
    pub fn execute<T>(
        &self,
        mut op: impl FnMut(u32) -> Result<T, AttemptError>,
        sleep: &mut dyn FnMut(Duration),
    ) -> Result<T, GatewayError> {
        let attempts = self.max_attempts.max(1);
        let mut rng = rand::thread_rng();
        let mut last_reason = String::new();
        let mut last_retry_after = None;
        let mut rate_limited = false;
        for attempt in 0..attempts {
            match op(attempt) {
                Ok(v) => return Ok(v),
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Retryable {
                    reason,
                    retry_after,
                    rate_limited: limited,
                }) => {
                    log::warn!("attempt {} failed: {reason}", attempt + 1);
                    last_reason = reason;
                    last_retry_after = retry_after;
                    rate_limited = limited;
                    if attempt + 1 < attempts {
                        let backoff = self.delay(attempt, rng.gen_range(-1.0..=1.0));
                        let wait = retry_after
                            .map_or(backoff, |ra| ra.max(backoff))
                            .min(self.max_delay.mul_f64(1.0 + self.jitter.max(0.0)));
                        sleep(wait);
                    }
                }
            }
        }
        if rate_limited {
            Err(GatewayError::RateLimited {
                retry_after: last_retry_after,
            })
        } else {
            Err(GatewayError::BackendUnavailable {
                attempts,
                reason: last_reason,
            })
        }
    }
}
