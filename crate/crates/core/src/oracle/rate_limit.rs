use std::collections::VecDeque;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};

use super::OracleError;

/// Time source for rate limiting and backoff, so tests can run on virtual time.
#[async_trait]
pub trait Clock: Send + Sync + fmt::Debug {
    /// Time elapsed since the clock's origin.
    fn now(&self) -> Duration;
    async fn sleep(&self, d: Duration);
}

#[derive(Debug)]
pub struct SystemClock {
    origin: tokio::time::Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self {
            origin: tokio::time::Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

#[async_trait]
impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    async fn sleep(&self, d: Duration) {
        tokio::time::sleep(d).await;
    }
}

/// A clock that only moves when someone sleeps on it. Sleeping jumps time
/// forward to the wake-up instant (never backwards).
#[derive(Debug, Default)]
pub struct VirtualClock {
    nanos: AtomicU64,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, d: Duration) {
        self.nanos.fetch_add(d.as_nanos() as u64, Ordering::SeqCst);
    }
}

#[async_trait]
impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.nanos.load(Ordering::SeqCst))
    }

    async fn sleep(&self, d: Duration) {
        let wake = self.now() + d;
        self.nanos.fetch_max(wake.as_nanos() as u64, Ordering::SeqCst);
        tokio::task::yield_now().await;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_base_ms: 500,
        }
    }
}

impl RetryPolicy {
    /// Delay after failed attempt number `attempt` (1-based): base * 2^(attempt-1).
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(16);
        Duration::from_millis(self.backoff_base_ms.saturating_mul(factor))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateLimitPolicy {
    pub tokens_per_minute: u64,
    pub max_concurrent: usize,
    pub retry: RetryPolicy,
}

impl Default for RateLimitPolicy {
    fn default() -> Self {
        Self {
            tokens_per_minute: 150_000,
            max_concurrent: 8,
            retry: RetryPolicy::default(),
        }
    }
}

/// Sliding-log token budget: within any 60 s window the admitted requests
/// together carry at most `budget` estimated tokens.
#[derive(Debug)]
pub struct RateLimiter {
    budget: u64,
    window: Duration,
    issued: Mutex<VecDeque<(Duration, u64)>>,
    clock: Arc<dyn Clock>,
}

impl RateLimiter {
    pub fn new(tokens_per_minute: u64, clock: Arc<dyn Clock>) -> Self {
        Self {
            budget: tokens_per_minute,
            window: Duration::from_secs(60),
            issued: Mutex::new(VecDeque::new()),
            clock,
        }
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    /// Waits until `tokens` fit in the window, then records them.
    pub async fn acquire(&self, tokens: u64) -> Result<(), OracleError> {
        if tokens > self.budget {
            return Err(OracleError::RequestTooLarge {
                tokens,
                budget: self.budget,
            });
        }
        loop {
            let wait = {
                let mut issued = self.issued.lock().expect("limiter lock");
                let now = self.clock.now();
                while issued.front().is_some_and(|&(t, _)| t + self.window <= now) {
                    issued.pop_front();
                }
                let used: u64 = issued.iter().map(|&(_, n)| n).sum();
                if used + tokens <= self.budget {
                    issued.push_back((now, tokens));
                    return Ok(());
                }
                // Anything left is strictly younger than the window, so this is positive.
                let (oldest, _) = issued.front().copied().expect("non-empty when over budget");
                oldest + self.window - now
            };
            self.clock.sleep(wait).await;
        }
    }
}

/// Rough prompt size used for budgeting: one token per four characters.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.chars().count() as u64).div_ceil(4)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles() {
        let r = RetryPolicy {
            max_attempts: 4,
            backoff_base_ms: 100,
        };
        assert_eq!(r.backoff(1), Duration::from_millis(100));
        assert_eq!(r.backoff(2), Duration::from_millis(200));
        assert_eq!(r.backoff(3), Duration::from_millis(400));
    }

    #[test]
    fn token_estimate_rounds_up() {
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("abcd"), 1);
        assert_eq!(estimate_tokens("abcde"), 2);
    }

    #[tokio::test]
    async fn virtual_sleep_never_moves_backwards() {
        let clock = VirtualClock::new();
        clock.sleep(Duration::from_secs(5)).await;
        assert_eq!(clock.now(), Duration::from_secs(5));
        clock.advance(Duration::from_secs(1));
        assert_eq!(clock.now(), Duration::from_secs(6));
    }

    #[tokio::test]
    async fn limiter_waits_for_the_window_to_slide() {
        let clock = Arc::new(VirtualClock::new());
        let limiter = RateLimiter::new(100, clock.clone());
        limiter.acquire(60).await.unwrap();
        clock.advance(Duration::from_secs(10));
        limiter.acquire(40).await.unwrap();
        assert_eq!(clock.now(), Duration::from_secs(10));
        // The 60-token entry from t=0 must expire before 30 more fit.
        limiter.acquire(30).await.unwrap();
        assert_eq!(clock.now(), Duration::from_secs(60));
        assert!(matches!(
            limiter.acquire(101).await,
            Err(OracleError::RequestTooLarge { tokens: 101, budget: 100 })
        ));
    }
}
