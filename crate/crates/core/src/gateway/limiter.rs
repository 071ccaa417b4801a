//! Per-backend concurrency bound plus an optional minimum spacing between
//! request starts.

use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

pub(crate) struct Limiter {
    max: usize,
    interval: Duration,
    state: Mutex<State>,
    freed: Condvar,
}

struct State {
    in_flight: usize,
    last_start: Option<Instant>,
}

pub(crate) struct Permit<'a> {
    limiter: &'a Limiter,
}

impl Limiter {
    pub(crate) fn new(max: usize, min_interval_ms: u64) -> Self {
        Self {
            max: max.max(1),
            interval: Duration::from_millis(min_interval_ms),
            state: Mutex::new(State { in_flight: 0, last_start: None }),
            freed: Condvar::new(),
        }
    }

    pub(crate) fn acquire(&self) -> Permit<'_> {
        let mut state = self.state.lock();
        while state.in_flight >= self.max {
            self.freed.wait(&mut state);
        }
        state.in_flight += 1;
        if !self.interval.is_zero() {
            let now = Instant::now();
            let start = match state.last_start {
                Some(prev) if prev + self.interval > now => prev + self.interval,
                _ => now,
            };
            state.last_start = Some(start);
            drop(state);
            let wait = start.saturating_duration_since(Instant::now());
            if !wait.is_zero() {
                std::thread::sleep(wait);
            }
        }
        Permit { limiter: self }
    }

    #[cfg(test)]
    fn in_flight(&self) -> usize {
        self.state.lock().in_flight
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut state = self.limiter.state.lock();
        state.in_flight -= 1;
        self.limiter.freed.notify_one();
    }
}
