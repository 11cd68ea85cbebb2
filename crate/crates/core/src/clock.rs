//! Time sources shared by the store, the daemons and the simulators.
//!
//! All timestamps are milliseconds since the Unix epoch (or since the
//! scenario origin for virtual clocks). The virtual clock never moves on its
//! own; a driver advances it between daemon rounds.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

/// Milliseconds.
pub type Millis = u64;

pub trait Clock: Send + Sync {
    fn now(&self) -> Millis;
}

/// Deterministic clock advanced explicitly by the scenario driver.
#[derive(Clone, Debug, Default)]
pub struct VirtualClock {
    now: Arc<AtomicU64>,
}

impl VirtualClock {
    pub fn new(start: Millis) -> Self {
        Self {
            now: Arc::new(AtomicU64::new(start)),
        }
    }

    pub fn advance(&self, dt: Millis) -> Millis {
        self.now.fetch_add(dt, Ordering::AcqRel) + dt
    }

    /// Moves the clock forward to `t`. Never moves it backwards.
    pub fn advance_to(&self, t: Millis) -> Millis {
        self.now.fetch_max(t, Ordering::AcqRel).max(t)
    }
}

impl Clock for VirtualClock {
    fn now(&self) -> Millis {
        self.now.load(Ordering::Acquire)
    }
}

/// Wall clock. Monotone per instance: a backwards step of the system clock is
/// clamped to the last value handed out so lease arithmetic never goes negative.
#[derive(Debug, Default)]
pub struct SystemClock {
    last: AtomicU64,
}

impl SystemClock {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Millis {
        let wall = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        self.last.fetch_max(wall, Ordering::AcqRel).max(wall)
    }
}

/// Wall time since construction, so real-time runs share the virtual
/// clock's origin at zero.
#[derive(Debug)]
pub struct ElapsedClock {
    start: std::time::Instant,
}

impl ElapsedClock {
    pub fn new() -> Self {
        Self {
            start: std::time::Instant::now(),
        }
    }
}

impl Default for ElapsedClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for ElapsedClock {
    fn now(&self) -> Millis {
        self.start.elapsed().as_millis() as Millis
    }
}

pub fn secs(s: f64) -> Millis {
    (s * 1000.0).round().max(0.0) as Millis
}
