use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

/// Global requests-per-minute spacing plus a bound on in-flight requests.
#[derive(Debug)]
pub struct RateLimiter {
    min_interval: Option<Duration>,
    next_slot: Mutex<Option<Instant>>,
    max_in_flight: usize,
    in_flight: Mutex<usize>,
    released: Condvar,
}

pub struct Permit<'a> {
    limiter: &'a RateLimiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.limiter.in_flight.lock().expect("limiter lock");
        *n -= 1;
        self.limiter.released.notify_one();
    }
}

impl RateLimiter {
    /// `requests_per_minute = 0` disables spacing; `max_in_flight` is at least 1.
    pub fn new(requests_per_minute: u32, max_in_flight: usize) -> Self {
        let min_interval = (requests_per_minute > 0)
            .then(|| Duration::from_secs_f64(60.0 / requests_per_minute as f64));
        Self {
            min_interval,
            next_slot: Mutex::new(None),
            max_in_flight: max_in_flight.max(1),
            in_flight: Mutex::new(0),
            released: Condvar::new(),
        }
    }

    pub fn unlimited() -> Self {
        Self::new(0, usize::MAX)
    }

    /// Blocks until a request may start.
    pub fn acquire(&self) -> Permit<'_> {
        {
            let mut n = self.in_flight.lock().expect("limiter lock");
            while *n >= self.max_in_flight {
                n = self.released.wait(n).expect("limiter lock");
            }
            *n += 1;
        }
        if let Some(interval) = self.min_interval {
            let wait = {
                let mut next = self.next_slot.lock().expect("limiter lock");
                let now = Instant::now();
                let start = next.map_or(now, |t| t.max(now));
                *next = Some(start + interval);
                start - now
            };
            if !wait.is_zero() {
                std::thread::sleep(wait);
            }
        }
        Permit { limiter: self }
    }
}
