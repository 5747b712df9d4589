use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::{Duration, Instant};

pub trait Clock: Send + Sync {
    /// Time elapsed since an arbitrary fixed origin.
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

#[derive(Debug)]
pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d)
    }
}

impl<C: Clock + ?Sized> Clock for std::sync::Arc<C> {
    fn now(&self) -> Duration {
        (**self).now()
    }

    fn sleep(&self, d: Duration) {
        (**self).sleep(d)
    }
}

/// Clock that only moves when slept on.
#[derive(Debug, Default)]
pub struct ManualClock {
    now: Mutex<Duration>,
}

impl ManualClock {
    pub fn advance(&self, d: Duration) {
        *self.now.lock().unwrap() += d;
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        *self.now.lock().unwrap()
    }

    fn sleep(&self, d: Duration) {
        self.advance(d);
    }
}

/// Sliding-window limiter: at most `limit` acquisitions in any `window`.
pub struct RateLimiter {
    limit: usize,
    window: Duration,
    clock: Box<dyn Clock>,
    starts: Mutex<VecDeque<Duration>>,
}

impl std::fmt::Debug for RateLimiter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RateLimiter").field("limit", &self.limit).field("window", &self.window).finish()
    }
}

impl RateLimiter {
    pub fn per_minute(limit: u32) -> Self {
        Self::with_clock(limit, Duration::from_secs(60), Box::new(SystemClock::default()))
    }

    pub fn with_clock(limit: u32, window: Duration, clock: Box<dyn Clock>) -> Self {
        RateLimiter { limit: limit.max(1) as usize, window, clock, starts: Mutex::new(VecDeque::new()) }
    }

    /// Blocks until a call may start, then records it.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut starts = self.starts.lock().unwrap();
                let now = self.clock.now();
                while starts.front().is_some_and(|&t| now >= t + self.window) {
                    starts.pop_front();
                }
                if starts.len() < self.limit {
                    starts.push_back(now);
                    return;
                }
                starts[0] + self.window - now
            };
            self.clock.sleep(wait);
        }
    }

    pub fn now(&self) -> Duration {
        self.clock.now()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn never_exceeds_limit_in_window() {
        let clock = Arc::new(ManualClock::default());
        let rl = RateLimiter::with_clock(5, Duration::from_secs(60), Box::new(clock.clone()));
        let mut grants = Vec::new();
        for i in 0..23 {
            rl.acquire();
            grants.push(clock.now());
            if i % 3 == 0 {
                clock.advance(Duration::from_secs(7));
            }
        }
        for (i, &t) in grants.iter().enumerate() {
            let in_window = grants[i..].iter().take_while(|&&u| u < t + Duration::from_secs(60)).count();
            assert!(in_window <= 5, "window starting at {t:?} has {in_window}");
        }
        assert!(clock.now() >= Duration::from_secs(60 * 3));
    }

    #[test]
    fn under_limit_does_not_wait() {
        let clock = Arc::new(ManualClock::default());
        let rl = RateLimiter::with_clock(10, Duration::from_secs(60), Box::new(clock.clone()));
        for _ in 0..10 {
            rl.acquire();
        }
        assert_eq!(clock.now(), Duration::ZERO);
    }
}
