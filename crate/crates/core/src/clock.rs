//! Monotonic time source shared by the emulator, the monitor and the
//! detector. Readings are nanoseconds since the clock was created.

use std::fmt::Debug;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub trait Clock: Send + Sync + Debug {
    fn now_ns(&self) -> u64;

    /// Blocks (or, for a simulated clock, advances) until `deadline_ns`.
    fn sleep_until(&self, deadline_ns: u64);

    fn sleep_for(&self, d: Duration) {
        let now = self.now_ns();
        self.sleep_until(now.saturating_add(d.as_nanos() as u64));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockKind {
    Real,
    Simulated,
}

#[derive(Debug)]
pub struct RealClock {
    origin: Instant,
}

impl RealClock {
    pub fn new() -> Self {
        RealClock { origin: Instant::now() }
    }
}

impl Default for RealClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for RealClock {
    fn now_ns(&self) -> u64 {
        self.origin.elapsed().as_nanos() as u64
    }

    fn sleep_until(&self, deadline_ns: u64) {
        let now = self.now_ns();
        if deadline_ns > now {
            std::thread::sleep(Duration::from_nanos(deadline_ns - now));
        }
    }
}

/// Manually driven clock. Sleeping jumps time forward to the deadline, so a
/// single driver thread sees exact, reproducible timings.
#[derive(Debug, Default)]
pub struct SimClock {
    now: AtomicU64,
}

impl SimClock {
    pub fn new() -> Self {
        Self::default()
    }

    /// Moves time to `t_ns` if that is later than the current reading.
    pub fn advance_to(&self, t_ns: u64) {
        self.now.fetch_max(t_ns, Ordering::SeqCst);
    }
}

impl Clock for SimClock {
    fn now_ns(&self) -> u64 {
        self.now.load(Ordering::SeqCst)
    }

    fn sleep_until(&self, deadline_ns: u64) {
        self.advance_to(deadline_ns);
    }
}
