use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use super::LogicalTime;

/// Source of logical milliseconds. Readings must never go backwards.
pub trait Clock: Send + Sync {
    fn now(&self) -> LogicalTime;
}

/// Manually advanced clock used by the simulator and tests.
#[derive(Debug, Default, Clone)]
pub struct SimClock {
    millis: Arc<AtomicU64>,
}

impl SimClock {
    pub fn new(start: LogicalTime) -> Self {
        Self { millis: Arc::new(AtomicU64::new(start.0)) }
    }

    /// Moves the clock to `t`. Earlier times are ignored so readings stay monotone.
    pub fn advance_to(&self, t: LogicalTime) {
        self.millis.fetch_max(t.0, Ordering::SeqCst);
    }
}

impl Clock for SimClock {
    fn now(&self) -> LogicalTime {
        LogicalTime(self.millis.load(Ordering::SeqCst))
    }
}

/// Wall-clock adapter: milliseconds elapsed since construction, offset by `origin`.
#[derive(Debug, Clone)]
pub struct MonotonicClock {
    started: Instant,
    origin: u64,
}

impl MonotonicClock {
    pub fn new(origin: LogicalTime) -> Self {
        Self { started: Instant::now(), origin: origin.0 }
    }
}

impl Default for MonotonicClock {
    fn default() -> Self {
        Self::new(LogicalTime(0))
    }
}

impl Clock for MonotonicClock {
    fn now(&self) -> LogicalTime {
        LogicalTime(self.origin + self.started.elapsed().as_millis() as u64)
    }
}
