use std::sync::{Condvar, Mutex};
use std::time::Duration;

use super::ProviderError;

pub trait Sleeper: Send + Sync {
    fn sleep(&self, d: Duration);
}

pub struct ThreadSleeper;

impl Sleeper for ThreadSleeper {
    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Records requested delays instead of sleeping.
#[derive(Debug, Default)]
pub struct VirtualClock {
    delays: Mutex<Vec<Duration>>,
}

impl VirtualClock {
    pub fn delays(&self) -> Vec<Duration> {
        self.delays.lock().unwrap().clone()
    }

    pub fn total(&self) -> Duration {
        self.delays().iter().sum()
    }
}

impl Sleeper for VirtualClock {
    fn sleep(&self, d: Duration) {
        self.delays.lock().unwrap().push(d);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self::new(3, Duration::from_secs(1))
    }
}

impl RetryPolicy {
    pub fn new(max_retries: u32, base: Duration) -> Self {
        Self { max_retries, base }
    }

    /// Delay before retry number `k` (0-based).
    pub fn delay(&self, k: u32) -> Duration {
        self.base.saturating_mul(1u32.checked_shl(k).unwrap_or(u32::MAX))
    }

    /// Calls `f` until it succeeds, fails with a non-retryable error, or the
    /// retry budget is spent.
    pub fn run<T>(
        &self,
        sleeper: &dyn Sleeper,
        mut f: impl FnMut() -> Result<T, ProviderError>,
    ) -> Result<T, ProviderError> {
        let mut k = 0;
        loop {
            match f() {
                Err(e) if e.is_retryable() && k < self.max_retries => {
                    sleeper.sleep(self.delay(k));
                    k += 1;
                }
                other => return other,
            }
        }
    }
}

/// Counting semaphore bounding in-flight calls.
#[derive(Debug)]
pub struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Self {
            free: Mutex::new(permits),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut free = self.cv.wait_while(self.free.lock().unwrap(), |n| *n == 0).unwrap();
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn attempts_follow_budget() {
        for max_retries in 0..4 {
            for failures in 0..6u32 {
                let policy = RetryPolicy::new(max_retries, Duration::from_millis(10));
                let clock = VirtualClock::default();
                let mut calls = 0u32;
                let res = policy.run(&clock, || {
                    calls += 1;
                    if calls <= failures {
                        Err(ProviderError::RateLimited { attempts: 1 })
                    } else {
                        Ok(())
                    }
                });
                assert_eq!(calls, failures.min(max_retries) + 1);
                assert_eq!(res.is_ok(), failures <= max_retries);
                let expected: Vec<_> = (0..calls - 1).map(|k| Duration::from_millis(10 * (1 << k))).collect();
                assert_eq!(clock.delays(), expected);
            }
        }
    }

    #[test]
    fn semaphore_bounds_concurrency() {
        let sem = Semaphore::new(2);
        let live = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| {
                    let _p = sem.acquire();
                    let n = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(n, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    live.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(peak.load(Ordering::SeqCst) <= 2);
    }
}
