use std::sync::{Condvar, Mutex};

/// Counting gate bounding the number of requests outstanding at once. Also
/// records the highest concurrency it has observed.
#[derive(Debug)]
pub struct InFlightLimiter {
    max: usize,
    state: Mutex<State>,
    freed: Condvar,
}

#[derive(Debug, Default)]
struct State {
    current: usize,
    peak: usize,
}

impl InFlightLimiter {
    pub fn new(max: usize) -> Self {
        Self {
            max: max.max(1),
            state: Mutex::new(State::default()),
            freed: Condvar::new(),
        }
    }

    pub fn max(&self) -> usize {
        self.max
    }

    /// Blocks until a slot is free.
    pub fn acquire(&self) -> Permit<'_> {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        while st.current >= self.max {
            st = self.freed.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        st.current += 1;
        st.peak = st.peak.max(st.current);
        Permit { limiter: self }
    }

    pub fn in_flight(&self) -> usize {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).current
    }

    pub fn peak(&self) -> usize {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).peak
    }
}

pub struct Permit<'a> {
    limiter: &'a InFlightLimiter,
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut st = self.limiter.state.lock().unwrap_or_else(|e| e.into_inner());
        st.current -= 1;
        drop(st);
        self.limiter.freed.notify_one();
    }
}
