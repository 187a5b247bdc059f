//! Temporal filtering of raw stereo depth: sliding median followed by
//! exponential smoothing.

use std::collections::{BTreeMap, VecDeque};

use crate::model::PartClass;

#[derive(Debug, Clone, PartialEq)]
pub struct DepthTrack {
    window: VecDeque<f64>,
    capacity: usize,
    alpha: f64,
    ema: Option<f64>,
}

impl DepthTrack {
    /// # Panics
    /// If `capacity` is zero or `alpha` is outside `(0, 1]`.
    pub fn new(capacity: usize, alpha: f64) -> Self {
        assert!(capacity >= 1, "depth window must hold at least one sample");
        assert!(alpha > 0.0 && alpha <= 1.0, "alpha must be in (0, 1]");
        DepthTrack {
            window: VecDeque::with_capacity(capacity),
            capacity,
            alpha,
            ema: None,
        }
    }

    /// Feeds one raw sample and returns the filtered depth, or `None` until the
    /// first valid sample. Non-finite or non-positive samples are dropouts:
    /// they leave the state untouched.
    pub fn push(&mut self, sample: f64) -> Option<f64> {
        if !(sample.is_finite() && sample > 0.0) {
            return self.ema;
        }
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(sample);
        let median = lower_median(self.window.iter().copied());
        self.ema = Some(match self.ema {
            None => median,
            Some(prev) => (1.0 - self.alpha) * prev + self.alpha * median,
        });
        self.ema
    }

    pub fn value(&self) -> Option<f64> {
        self.ema
    }

    pub fn window(&self) -> impl Iterator<Item = f64> + '_ {
        self.window.iter().copied()
    }
}

/// Lower median: for even counts the smaller of the two middle values.
fn lower_median(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v[(v.len() - 1) / 2]
}

/// One depth track per part class.
#[derive(Debug, Clone)]
pub struct DepthBank {
    tracks: BTreeMap<PartClass, DepthTrack>,
    capacity: usize,
    alpha: f64,
}

impl DepthBank {
    pub fn new(capacity: usize, alpha: f64) -> Self {
        DepthBank {
            tracks: BTreeMap::new(),
            capacity,
            alpha,
        }
    }

    pub fn push(&mut self, part: PartClass, sample: f64) -> Option<f64> {
        let (capacity, alpha) = (self.capacity, self.alpha);
        self.tracks
            .entry(part)
            .or_insert_with(|| DepthTrack::new(capacity, alpha))
            .push(sample)
    }

    pub fn value(&self, part: PartClass) -> Option<f64> {
        self.tracks.get(&part).and_then(DepthTrack::value)
    }
}
