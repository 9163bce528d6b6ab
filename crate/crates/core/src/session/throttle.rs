/// Rate limiter for metrics: at most one emission per interval, the first
/// one immediately, and newer values replace older undelivered ones.
#[derive(Debug)]
pub struct Throttle<T> {
    interval: f64,
    last_emit: Option<f64>,
    pending: Option<T>,
}

impl<T> Throttle<T> {
    pub fn new(interval_secs: f64) -> Self {
        Self {
            interval: interval_secs,
            last_emit: None,
            pending: None,
        }
    }

    /// Ten per second.
    pub fn ten_hertz() -> Self {
        Self::new(0.1)
    }

    /// Offers a value at time `now`; returns what should go out now.
    pub fn offer(&mut self, value: T, now: f64) -> Option<T> {
        self.pending = Some(value);
        self.poll(now)
    }

    /// Releases the pending value once the interval has elapsed.
    pub fn poll(&mut self, now: f64) -> Option<T> {
        let due = self.last_emit.is_none_or(|t| now - t >= self.interval);
        if due && self.pending.is_some() {
            self.last_emit = Some(now);
            self.pending.take()
        } else {
            None
        }
    }

    /// Releases the pending value regardless of timing, e.g. before a
    /// state change so the last step is not lost.
    pub fn flush(&mut self, now: f64) -> Option<T> {
        let out = self.pending.take();
        if out.is_some() {
            self.last_emit = Some(now);
        }
        out
    }

    pub fn has_pending(&self) -> bool {
        self.pending.is_some()
    }
}
