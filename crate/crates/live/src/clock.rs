//! Wall clock for live sessions, optionally running faster than real time.

use std::time::{Duration, Instant};

use stageverify_core::link::Clock;
use stageverify_core::model::TimeMs;

/// Milliseconds since a fixed start, multiplied by `scale`.
///
/// A scale of 1 is real time. Larger scales let a recorded session be
/// driven live in a fraction of its length; every timer in the engine keeps
/// working in the scaled domain.
#[derive(Debug, Clone, Copy)]
pub struct LiveClock {
    start: Instant,
    scale: f64,
}

impl LiveClock {
    /// Returns `None` unless `scale` is finite and positive.
    pub fn new(scale: f64) -> Option<Self> {
        Self::starting_at(Instant::now(), scale)
    }

    pub fn starting_at(start: Instant, scale: f64) -> Option<Self> {
        (scale.is_finite() && scale > 0.0).then_some(LiveClock { start, scale })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn start(&self) -> Instant {
        self.start
    }

    /// Real time needed for `live_ms` to pass on this clock.
    pub fn real_duration(&self, live_ms: TimeMs) -> Duration {
        Duration::from_secs_f64(live_ms as f64 / 1000.0 / self.scale)
    }

    /// Real instant at which this clock reads `live_ms`.
    pub fn instant_at(&self, live_ms: TimeMs) -> Instant {
        self.start + self.real_duration(live_ms)
    }
}

impl Clock for LiveClock {
    fn now_ms(&self) -> TimeMs {
        (self.start.elapsed().as_secs_f64() * 1000.0 * self.scale) as TimeMs
    }
}
