//! Byte-rate pacing shared by concurrent streams.
//!
//! Each caller reserves the next `n / rate` seconds of the shared timeline
//! and waits until its reservation ends, so the aggregate never exceeds
//! the configured rate. Idle time is not banked.

use std::sync::Mutex;
use std::time::{Duration, Instant};

#[derive(Debug)]
pub struct RateLimiter {
    bytes_per_sec: f64,
    next: Mutex<Instant>,
}

impl RateLimiter {
    pub fn new(bytes_per_sec: u64) -> Self {
        RateLimiter {
            bytes_per_sec: bytes_per_sec.max(1) as f64,
            next: Mutex::new(Instant::now()),
        }
    }

    /// Reserves `n` bytes and returns the instant the caller may proceed.
    pub fn reserve(&self, n: usize) -> Instant {
        let mut next = self.next.lock().unwrap_or_else(|e| e.into_inner());
        let now = Instant::now();
        let start = (*next).max(now);
        *next = start + Duration::from_secs_f64(n as f64 / self.bytes_per_sec);
        *next
    }

    pub async fn acquire(&self, n: usize) {
        let until = self.reserve(n);
        tokio::time::sleep_until(until.into()).await;
    }

    pub fn acquire_blocking(&self, n: usize) {
        let until = self.reserve(n);
        let now = Instant::now();
        if until > now {
            std::thread::sleep(until - now);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paces_to_rate() {
        let rl = RateLimiter::new(1_000_000);
        let t0 = Instant::now();
        for _ in 0..20 {
            rl.acquire_blocking(10_000);
        }
        let dt = t0.elapsed().as_secs_f64();
        assert!((0.19..0.3).contains(&dt), "{dt}");
    }

    #[test]
    fn shared_across_threads() {
        let rl = std::sync::Arc::new(RateLimiter::new(2_000_000));
        let t0 = Instant::now();
        let hs: Vec<_> = (0..4)
            .map(|_| {
                let rl = rl.clone();
                std::thread::spawn(move || {
                    for _ in 0..10 {
                        rl.acquire_blocking(10_000);
                    }
                })
            })
            .collect();
        for h in hs {
            h.join().unwrap();
        }
        let dt = t0.elapsed().as_secs_f64();
        assert!((0.19..0.3).contains(&dt), "{dt}");
    }
}
