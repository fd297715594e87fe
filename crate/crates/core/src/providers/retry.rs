use std::time::Duration;

use rand::Rng;

use super::ProviderError;

/// Exponential backoff with full jitter. Only transient failures are retried.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub budget: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            budget: 3,
            base_delay: Duration::from_millis(200),
            max_delay: Duration::from_secs(10),
        }
    }
}

impl RetryPolicy {
    pub fn with_budget(budget: u32) -> Self {
        Self { budget, ..Default::default() }
    }

    /// Upper bound of the sleep before retry number `attempt` (1-based).
    pub fn backoff_cap(&self, attempt: u32) -> Duration {
        let factor = 1u32.checked_shl(attempt.saturating_sub(1).min(20)).unwrap_or(u32::MAX);
        self.base_delay.saturating_mul(factor).min(self.max_delay)
    }

    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, ProviderError>) -> Result<T, ProviderError> {
        let mut attempt = 0u32;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_transient() && attempt < self.budget => {
                    attempt += 1;
                    let cap = self.backoff_cap(attempt);
                    let sleep = if cap.is_zero() {
                        cap
                    } else {
                        cap.mul_f64(rand::rng().random_range(0.0..=1.0))
                    };
                    log::debug!("transient provider failure ({e}), retry {attempt}/{} in {sleep:?}", self.budget);
                    std::thread::sleep(sleep);
                }
                Err(e) if e.is_transient() => {
                    return Err(ProviderError::RetriesExhausted {
                        attempts: attempt + 1,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }
}
