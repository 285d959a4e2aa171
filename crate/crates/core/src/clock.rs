//! Shared monotonic nanosecond clock.
//!
//! Every component stamps time through a [`Clock`]. The real clock reads the
//! host's monotonic counter; the virtual clock only moves when the runtime
//! (or a synthetic cost) advances it, which makes whole-device runs
//! deterministic.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

/// Nanoseconds since the clock's epoch.
pub type Nanos = u64;

#[derive(Clone, Debug)]
pub struct Clock {
    inner: Arc<ClockInner>,
}

#[derive(Debug)]
enum ClockInner {
    Real(Instant),
    Virtual(AtomicU64),
}

impl Clock {
    pub fn real() -> Self {
        Self {
            inner: Arc::new(ClockInner::Real(Instant::now())),
        }
    }

    pub fn virtual_at(start: Nanos) -> Self {
        Self {
            inner: Arc::new(ClockInner::Virtual(AtomicU64::new(start))),
        }
    }

    pub fn is_virtual(&self) -> bool {
        matches!(*self.inner, ClockInner::Virtual(_))
    }

    #[inline]
    pub fn now(&self) -> Nanos {
        match &*self.inner {
            ClockInner::Real(epoch) => epoch.elapsed().as_nanos() as Nanos,
            ClockInner::Virtual(t) => t.load(Ordering::Acquire),
        }
    }

    /// Moves a virtual clock forward to `t` (never backwards). No-op on the
    /// real clock.
    pub fn advance_to(&self, t: Nanos) {
        if let ClockInner::Virtual(cur) = &*self.inner {
            cur.fetch_max(t, Ordering::AcqRel);
        }
    }

    /// Consumes `ns` of agent time. The real clock busy-waits; the virtual
    /// clock is advanced by the same amount so modeled costs stay visible in
    /// virtual-time measurements.
    pub fn burn(&self, ns: Nanos) {
        if ns == 0 {
            return;
        }
        match &*self.inner {
            ClockInner::Real(_) => {
                let end = self.now() + ns;
                while self.now() < end {
                    std::hint::spin_loop();
                }
            }
            ClockInner::Virtual(cur) => {
                cur.fetch_add(ns, Ordering::AcqRel);
            }
        }
    }

    /// Resolution of timestamps for "no earlier than" comparisons.
    pub fn granularity(&self) -> Nanos {
        match &*self.inner {
            ClockInner::Real(_) => 1_000,
            ClockInner::Virtual(_) => 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn virtual_clock_moves_only_forward() {
        let c = Clock::virtual_at(100);
        assert_eq!(c.now(), 100);
        c.advance_to(50);
        assert_eq!(c.now(), 100);
        c.advance_to(250);
        c.burn(10);
        assert_eq!(c.now(), 260);
    }

    #[test]
    fn real_clock_burn_waits() {
        let c = Clock::real();
        let t0 = c.now();
        c.burn(20_000);
        assert!(c.now() - t0 >= 20_000);
    }
}
