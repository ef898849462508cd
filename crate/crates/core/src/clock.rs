//! Time sources for transcripts and reports.
//!
//! Sessions stamp every turn. Simulation and tests use [`StepClock`] so that
//! transcripts are byte-identical across runs.

use std::sync::atomic::{AtomicI64, Ordering};

use chrono::{DateTime, TimeZone, Utc};

pub trait Clock: Send + Sync {
    fn now(&self) -> DateTime<Utc>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> DateTime<Utc> {
        Utc::now()
    }
}

/// Deterministic clock: starts at `origin` and advances one second per reading.
#[derive(Debug)]
pub struct StepClock {
    origin: DateTime<Utc>,
    ticks: AtomicI64,
}

impl StepClock {
    pub fn new(origin: DateTime<Utc>) -> Self {
        Self {
            origin,
            ticks: AtomicI64::new(0),
        }
    }
}

impl Default for StepClock {
    fn default() -> Self {
        Self::new(Utc.with_ymd_and_hms(2026, 1, 1, 8, 0, 0).unwrap())
    }
}

impl Clock for StepClock {
    fn now(&self) -> DateTime<Utc> {
        let t = self.ticks.fetch_add(1, Ordering::SeqCst);
        self.origin + chrono::Duration::seconds(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_clock_advances_one_second() {
        let c = StepClock::default();
        let a = c.now();
        let b = c.now();
        assert_eq!((b - a).num_seconds(), 1);
    }
}
