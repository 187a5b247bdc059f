use std::collections::{BTreeMap, VecDeque};

use crate::depth::DepthBank;
use crate::fsm::{FusedObservation, Staleness};
use crate::gesture::{DoneParams, HandFrame, HandGestures, WindowClassifier};
use crate::link::{HoleAggregate, HoleReport};
use crate::model::{ActionConfidence, DetectionFrame, ObjAngle, PartClass, ThresholdConfig, TimeMs};

/// Snaps `now` down onto the fusion grid.
pub fn snap_to_grid(now: TimeMs, tick_ms: u64) -> TimeMs {
    now - now % tick_ms.max(1)
}

fn fresh(t: TimeMs, tick: TimeMs, ttl: u64) -> bool {
    t <= tick && tick - t <= ttl
}

/// Most recent entry no newer than `tick` and no older than `ttl`.
fn latest<T>(buf: &VecDeque<T>, tick: TimeMs, ttl: u64, t_of: impl Fn(&T) -> TimeMs) -> Option<&T> {
    buf.iter().rev().find(|x| t_of(x) <= tick).filter(|x| fresh(t_of(x), tick, ttl))
}

fn prune<T>(buf: &mut VecDeque<T>, tick: TimeMs, ttl: u64, t_of: impl Fn(&T) -> TimeMs) {
    while buf.front().is_some_and(|x| t_of(x) + ttl < tick) {
        buf.pop_front();
    }
}

/// Timestamped wrist positions of one hand.
type WristTrack = VecDeque<(TimeMs, (f64, f64))>;

/// Recent inputs of every source plus the per-source filters.
pub struct InputBuffers {
    dets: VecDeque<DetectionFrame>,
    angles: VecDeque<ObjAngle>,
    acf_records: VecDeque<ActionConfidence>,
    wrists: BTreeMap<u32, WristTrack>,
    gestures: HandGestures,
    depth: DepthBank,
    holes: HoleAggregate,
    rejected_hands: u64,
}

impl std::fmt::Debug for InputBuffers {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InputBuffers")
            .field("dets", &self.dets.len())
            .field("angles", &self.angles.len())
            .field("rejected_hands", &self.rejected_hands)
            .finish()
    }
}

impl InputBuffers {
    pub fn new(cfg: &ThresholdConfig, classifier: Box<dyn WindowClassifier + Send + Sync>) -> Self {
        InputBuffers {
            dets: VecDeque::new(),
            angles: VecDeque::new(),
            acf_records: VecDeque::new(),
            wrists: BTreeMap::new(),
            gestures: HandGestures::new(classifier, DoneParams::default(), cfg.acf_ttl_ms),
            depth: DepthBank::new(cfg.depth_window, cfg.depth_alpha),
            holes: HoleAggregate::new(),
            rejected_hands: 0,
        }
    }

    /// Feeds the depth filters once per frame with the best detection of each
    /// class that carries a depth.
    pub fn push_detections(&mut self, frame: DetectionFrame) {
        for part in PartClass::ALL {
            if let Some(d) = frame.best(part).and_then(|d| d.depth_mm) {
                self.depth.push(part, d);
            }
        }
        self.dets.push_back(frame);
    }

    pub fn push_angle(&mut self, a: ObjAngle) {
        self.angles.push_back(a);
    }

    pub fn push_acf(&mut self, a: ActionConfidence) {
        self.acf_records.push_back(a);
    }

    /// Frames the classifier cannot use (degenerate or wrong keypoint count)
    /// are counted and dropped.
    pub fn push_hand(&mut self, index: u32, frame: &HandFrame) {
        if let Some(w) = frame.wrist() {
            self.wrists.entry(index).or_default().push_back((frame.t_ms, (w[0], w[1])));
        }
        if self.gestures.push(index as usize, frame).is_err() {
            self.rejected_hands += 1;
        }
    }

    pub fn push_holes(&mut self, now: TimeMs, reports: &[HoleReport], cfg: &ThresholdConfig) {
        self.holes.update(now, reports, cfg);
    }

    pub fn holes(&self) -> &HoleAggregate {
        &self.holes
    }

    pub fn rejected_hands(&self) -> u64 {
        self.rejected_hands
    }
}

/// Builds the observation for the tick at `now` (snapped to the grid).
pub fn fuse_tick(buf: &mut InputBuffers, now: TimeMs, cfg: &ThresholdConfig) -> FusedObservation {
    let tick = snap_to_grid(now, cfg.tick_ms);
    let det_t = |f: &DetectionFrame| f.t_ms;
    let acf_t = |a: &ActionConfidence| a.t_ms;
    let angle_t = |a: &ObjAngle| a.t_ms;

    let detections = latest(&buf.dets, tick, cfg.det_ttl_ms, det_t).cloned();
    let depth = detections
        .iter()
        .flat_map(|f| f.detections.iter())
        .filter_map(|d| buf.depth.value(d.part).map(|v| (d.part, v)))
        .collect();
    // the object angle comes from the same camera pass as the detections
    let obj_angle = latest(&buf.angles, tick, cfg.det_ttl_ms, angle_t).copied();
    let recorded = latest(&buf.acf_records, tick, cfg.acf_ttl_ms, acf_t).copied();
    let classified = buf.gestures.current(tick, cfg.acf_ttl_ms);
    let acf = match (recorded, classified) {
        (Some(a), Some(b)) => Some(a.max(&b)),
        (a, b) => a.or(b),
    };
    let wrists: Vec<(f64, f64)> = buf
        .wrists
        .values()
        .filter_map(|q| latest(q, tick, cfg.acf_ttl_ms, |w| w.0).map(|w| w.1))
        .collect();

    buf.holes.update(tick, &[], cfg);
    let holes = buf.holes.summary().iter().map(|(h, s)| (h.clone(), s.state)).collect();

    prune(&mut buf.dets, tick, cfg.det_ttl_ms, det_t);
    prune(&mut buf.angles, tick, cfg.det_ttl_ms, angle_t);
    prune(&mut buf.acf_records, tick, cfg.acf_ttl_ms, acf_t);
    for q in buf.wrists.values_mut() {
        prune(q, tick, cfg.acf_ttl_ms, |w| w.0);
    }

    let stale = Staleness {
        detections: detections.is_none(),
        acf: acf.is_none(),
        angle: obj_angle.is_none(),
        hands: wrists.is_empty(),
        holes: buf.holes.summary().values().any(|s| s.state == crate::link::HoleState::Unknown),
    };
    FusedObservation {
        tick_ms: tick,
        detections,
        depth,
        acf,
        obj_angle,
        holes,
        wrists,
        stale,
    }
}
