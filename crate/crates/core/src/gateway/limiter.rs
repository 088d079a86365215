use std::sync::{Condvar, Mutex};

/// Counting semaphore bounding in-flight requests for one backend role.
#[derive(Debug)]
pub struct Limiter {
    max: usize,
    state: Mutex<State>,
    freed: Condvar,
}

#[derive(Debug, Default)]
struct State {
    in_flight: usize,
    peak: usize,
}

pub struct Permit<'a> {
    limiter: &'a Limiter,
}

impl Limiter {
    pub fn new(max: usize) -> Self {
        Self { max: max.max(1), state: Mutex::new(State::default()), freed: Condvar::new() }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut state = self.state.lock().expect("limiter lock");
        while state.in_flight >= self.max {
            state = self.freed.wait(state).expect("limiter lock");
        }
        state.in_flight += 1;
        state.peak = state.peak.max(state.in_flight);
        Permit { limiter: self }
    }

    /// Highest number of simultaneously held permits so far.
    pub fn peak(&self) -> usize {
        self.state.lock().expect("limiter lock").peak
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut state = self.limiter.state.lock().expect("limiter lock");
        state.in_flight -= 1;
        self.limiter.freed.notify_one();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::time::Duration;

    #[test]
    fn never_exceeds_max() {
        let limiter = Limiter::new(3);
        let current = AtomicUsize::new(0);
        let worst = AtomicUsize::new(0);
        std::thread::scope(|s| {
            for _ in 0..16 {
                s.spawn(|| {
                    let _p = limiter.acquire();
                    let now = current.fetch_add(1, Ordering::SeqCst) + 1;
                    worst.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(5));
                    current.fetch_sub(1, Ordering::SeqCst);
                });
            }
        });
        assert!(worst.load(Ordering::SeqCst) <= 3);
        assert!(limiter.peak() <= 3);
    }
}
