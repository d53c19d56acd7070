//! Time sources. Nodes read time only through [`Clock`], so a whole run can
//! be driven by [`SimClock`] faster than real time.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

pub trait Clock: Send {
    /// Seconds on this clock's timescale.
    fn now(&self) -> f64;
    /// Blocks (or advances simulated time) for `seconds`.
    fn sleep(&self, seconds: f64);

    /// False when `sleep` advances time instantly instead of blocking.
    fn is_realtime(&self) -> bool {
        true
    }

    fn now_ms(&self) -> u64 {
        (self.now() * 1000.0).round().max(0.0) as u64
    }
}

impl<C: Clock + ?Sized> Clock for Box<C> {
    fn now(&self) -> f64 {
        (**self).now()
    }

    fn sleep(&self, seconds: f64) {
        (**self).sleep(seconds)
    }

    fn is_realtime(&self) -> bool {
        (**self).is_realtime()
    }
}

/// Wall clock, seconds since the Unix epoch.
#[derive(Debug, Clone, Copy, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now(&self) -> f64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0.0, |d| d.as_secs_f64())
    }

    fn sleep(&self, seconds: f64) {
        if seconds > 0.0 {
            std::thread::sleep(Duration::from_secs_f64(seconds));
        }
    }
}

/// Manually advanced clock. Clones share the same time.
#[derive(Debug, Clone, Default)]
pub struct SimClock {
    // f64 bits, so the clock is Sync without a lock.
    bits: Arc<AtomicU64>,
}

impl SimClock {
    pub fn starting_at(seconds: f64) -> Self {
        Self {
            bits: Arc::new(AtomicU64::new(seconds.to_bits())),
        }
    }

    pub fn advance(&self, seconds: f64) {
        let _ = self
            .bits
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |b| {
                Some((f64::from_bits(b) + seconds.max(0.0)).to_bits())
            });
    }
}

impl Clock for SimClock {
    fn now(&self) -> f64 {
        f64::from_bits(self.bits.load(Ordering::SeqCst))
    }

    fn sleep(&self, seconds: f64) {
        self.advance(seconds);
    }

    fn is_realtime(&self) -> bool {
        false
    }
}
