//! Hand-keypoint windows and action classification.
//!
//! Keypoints follow the common 21-point hand layout: wrist at 0, thumb 1-4,
//! index 5-8, middle 9-12, ring 13-16, pinky 17-20. Each frame is normalized
//! to a wrist-centered unit span, reduced to a keypoint subset and appended
//! to a fixed-length window that a [`WindowClassifier`] scores.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Action, ActionConfidence, TimeMs};

pub const WINDOW_FRAMES: usize = 30;
pub const DEFAULT_KEYPOINTS: usize = 21;
/// Wrist, five fingertips, four knuckle bases.
pub const DEFAULT_FEATURE_POINTS: [usize; 10] = [0, 4, 8, 12, 16, 20, 5, 9, 13, 17];
pub const THUMB_TIP: usize = 4;
pub const INDEX_TIP: usize = 8;
pub const MIDDLE_TIP: usize = 12;
pub const RING_TIP: usize = 16;
pub const PINKY_TIP: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum GestureError {
    #[error("hand is degenerate: all keypoints coincide")]
    DegenerateHand,
    #[error("hand has no wrist point")]
    MissingWrist,
    #[error("keypoint coordinates must be finite")]
    NonFinite,
    #[error("expected {expected} keypoints, got {got}")]
    FeatureLengthMismatch { expected: usize, got: usize },
    #[error("window holds {0} of {WINDOW_FRAMES} frames")]
    NotReady(usize),
    #[error("classifier has no templates")]
    NoTemplates,
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
}

/// One hand's keypoints at one instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandFrame {
    pub t_ms: TimeMs,
    pub points: Vec<[f64; 3]>,
}

impl HandFrame {
    pub fn wrist(&self) -> Option<[f64; 3]> {
        self.points.first().copied()
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Translates the wrist to the origin and scales so the farthest keypoint is
/// at distance 1.
pub fn normalize_hand(frame: &HandFrame) -> Result<HandFrame, GestureError> {
    let wrist = frame.wrist().ok_or(GestureError::MissingWrist)?;
    if frame.points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(GestureError::NonFinite);
    }
    let span = frame.points.iter().map(|p| dist(*p, wrist)).fold(0.0, f64::max);
    if span <= f64::EPSILON {
        return Err(GestureError::DegenerateHand);
    }
    let points = frame
        .points
        .iter()
        .map(|p| {
            [
                (p[0] - wrist[0]) / span,
                (p[1] - wrist[1]) / span,
                (p[2] - wrist[2]) / span,
            ]
        })
        .collect();
    Ok(HandFrame {
        t_ms: frame.t_ms,
        points,
    })
}

/// Thresholds for the fingertip "Done" rule, in normalized units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DoneParams {
    pub d_pinch: f64,
    pub d_extend: f64,
}

impl Default for DoneParams {
    fn default() -> Self {
        DoneParams {
            d_pinch: 0.15,
            d_extend: 0.6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoneSignal {
    pub is_done: bool,
    pub conf: f64,
}

/// OK-sign test on a normalized frame: thumb and index tips pinched while the
/// other three fingers are extended. Confidence falls linearly from 1 at
/// contact to 0 at `d_pinch`, and is 0 whenever the extension condition fails.
pub fn done_heuristic(frame: &HandFrame, params: DoneParams) -> Result<DoneSignal, GestureError> {
    if frame.points.len() <= PINKY_TIP {
        return Err(GestureError::FeatureLengthMismatch {
            expected: DEFAULT_KEYPOINTS,
            got: frame.points.len(),
        });
    }
    let wrist = frame.wrist().ok_or(GestureError::MissingWrist)?;
    let p = &frame.points;
    let pinch = dist(p[THUMB_TIP], p[INDEX_TIP]);
    let extended = [MIDDLE_TIP, RING_TIP, PINKY_TIP]
        .iter()
        .all(|&i| dist(p[i], wrist) > params.d_extend);
    let is_done = pinch < params.d_pinch && extended;
    let conf = if extended {
        (1.0 - pinch / params.d_pinch).clamp(0.0, 1.0)
    } else {
        0.0
    };
    Ok(DoneSignal { is_done, conf })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Readiness {
    NotReady,
    Ready,
}

/// Ring buffer of the most recent [`WINDOW_FRAMES`] feature rows.
#[derive(Debug, Clone)]
pub struct GestureWindow {
    keypoints: usize,
    subset: Vec<usize>,
    frames: VecDeque<(TimeMs, Vec<[f64; 3]>)>,
}

impl Default for GestureWindow {
    fn default() -> Self {
        Self::new(DEFAULT_KEYPOINTS, DEFAULT_FEATURE_POINTS.to_vec())
    }
}

impl GestureWindow {
    /// # Panics
    /// If a subset index is out of range for `keypoints`.
    pub fn new(keypoints: usize, subset: Vec<usize>) -> Self {
        assert!(subset.iter().all(|&i| i < keypoints), "feature subset index out of range");
        GestureWindow {
            keypoints,
            subset,
            frames: VecDeque::with_capacity(WINDOW_FRAMES),
        }
    }

    pub fn features_per_frame(&self) -> usize {
        self.subset.len() * 4
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn is_ready(&self) -> bool {
        self.frames.len() == WINDOW_FRAMES
    }

    pub fn last_t(&self) -> Option<TimeMs> {
        self.frames.back().map(|f| f.0)
    }

    pub fn clear(&mut self) {
        self.frames.clear();
    }

    pub fn push(&mut self, frame: &HandFrame) -> Result<Readiness, GestureError> {
        if frame.points.len() != self.keypoints {
            return Err(GestureError::FeatureLengthMismatch {
                expected: self.keypoints,
                got: frame.points.len(),
            });
        }
        if self.frames.len() == WINDOW_FRAMES {
            self.frames.pop_front();
        }
        let row = self.subset.iter().map(|&i| frame.points[i]).collect();
        self.frames.push_back((frame.t_ms, row));
        Ok(if self.is_ready() {
            Readiness::Ready
        } else {
            Readiness::NotReady
        })
    }

    /// Flattened window, keypoint-major within each frame: `x, y, z, t` per
    /// keypoint, with `t` rebased to the first frame and scaled by the window
    /// span to `[0, 1]`.
    pub fn features(&self) -> Result<Vec<f64>, GestureError> {
        if !self.is_ready() {
            return Err(GestureError::NotReady(self.frames.len()));
        }
        let t0 = self.frames.front().map(|f| f.0).unwrap_or(0);
        let span = self.frames.back().map(|f| f.0).unwrap_or(0).saturating_sub(t0);
        let mut out = Vec::with_capacity(WINDOW_FRAMES * self.features_per_frame());
        for (t, row) in &self.frames {
            let tn = if span == 0 { 0.0 } else { (t - t0) as f64 / span as f64 };
            for p in row {
                out.extend_from_slice(&[p[0], p[1], p[2], tn]);
            }
        }
        Ok(out)
    }
}

/// Scores a flattened window: one confidence in `[0, 1]` per action, in
/// [`Action::ALL`] order.
pub trait WindowClassifier {
    fn classify(&self, features: &[f64]) -> Result<[f64; 4], GestureError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GestureTemplate {
    pub label: Action,
    pub features: Vec<f64>,
}

/// Parses a JSON array of `{label, features}` templates.
pub fn templates_from_json(text: &str) -> Result<Vec<GestureTemplate>, GestureError> {
    let t: Vec<GestureTemplate> = serde_json::from_str(text).map_err(|e| GestureError::InvalidTemplate(e.to_string()))?;
    Ok(t)
}

pub fn templates_to_json(templates: &[GestureTemplate]) -> String {
    serde_json::to_string(templates).expect("templates serialize")
}

/// Cosine similarity to the closest template of each label, mapped to
/// `[0, 1]` by `(sim + 1) / 2`. Labels with no template score 0.
#[derive(Debug, Clone)]
pub struct NearestTemplateClassifier {
    templates: Vec<GestureTemplate>,
    center: Option<Vec<f64>>,
}

impl NearestTemplateClassifier {
    pub fn new(templates: Vec<GestureTemplate>) -> Result<Self, GestureError> {
        if let Some(first) = templates.first() {
            let n = first.features.len();
            for t in &templates {
                if t.features.len() != n {
                    return Err(GestureError::InvalidTemplate(format!(
                        "{:?} template has {} features, expected {n}",
                        t.label,
                        t.features.len()
                    )));
                }
                if t.features.iter().any(|v| !v.is_finite()) {
                    return Err(GestureError::InvalidTemplate(format!("{:?} template is not finite", t.label)));
                }
            }
        }
        Ok(NearestTemplateClassifier {
            templates,
            center: None,
        })
    }

    /// Compares windows after subtracting the mean of the per-label template
    /// means. Posture common to every gesture then no longer counts as
    /// similarity.
    pub fn centered(self) -> Self {
        self.centered_with(&[])
    }

    /// Like [`centered`](Self::centered), with extra neutral windows (a
    /// resting hand, say) averaged into the center as if each were one more
    /// label. Windows that look neutral then score low on every action.
    pub fn centered_with(mut self, neutral: &[Vec<f64>]) -> Self {
        let Some(first) = self.templates.first() else {
            return self;
        };
        let n = first.features.len();
        let mut groups: Vec<Vec<&[f64]>> = Action::ALL
            .iter()
            .map(|a| {
                self.templates
                    .iter()
                    .filter(|t| t.label == *a)
                    .map(|t| t.features.as_slice())
                    .collect::<Vec<_>>()
            })
            .filter(|g| !g.is_empty())
            .collect();
        groups.extend(neutral.iter().filter(|w| w.len() == n).map(|w| vec![w.as_slice()]));
        let mut center = vec![0.0; n];
        for g in &groups {
            for f in g {
                for (c, v) in center.iter_mut().zip(*f) {
                    *c += v / g.len() as f64;
                }
            }
        }
        for c in &mut center {
            *c /= groups.len() as f64;
        }
        for t in &mut self.templates {
            for (v, c) in t.features.iter_mut().zip(&center) {
                *v -= c;
            }
        }
        self.center = Some(center);
        self
    }

    pub fn templates(&self) -> &[GestureTemplate] {
        &self.templates
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb).sqrt()).clamp(-1.0, 1.0)
}

impl WindowClassifier for NearestTemplateClassifier {
    fn classify(&self, features: &[f64]) -> Result<[f64; 4], GestureError> {
        let first = self.templates.first().ok_or(GestureError::NoTemplates)?;
        if features.len() != first.features.len() {
            return Err(GestureError::FeatureLengthMismatch {
                expected: first.features.len(),
                got: features.len(),
            });
        }
        let centered;
        let x: &[f64] = match &self.center {
            Some(c) => {
                centered = features.iter().zip(c).map(|(v, c)| v - c).collect::<Vec<_>>();
                &centered
            }
            None => features,
        };
        let mut best = [None::<f64>; 4];
        for t in &self.templates {
            let s = cosine(x, &t.features);
            let slot = &mut best[t.label.index()];
            *slot = Some(slot.map_or(s, |b: f64| b.max(s)));
        }
        Ok(best.map(|s| s.map_or(0.0, |s| (s + 1.0) / 2.0)))
    }
}

/// Scores a ready window. The done component is raised to the latest
/// fingertip-heuristic confidence when that is higher.
pub fn classify_window(
    window: &GestureWindow,
    classifier: &dyn WindowClassifier,
    done_conf: Option<f64>,
) -> Result<ActionConfidence, GestureError> {
    let features = window.features()?;
    let mut scores = classifier.classify(&features)?;
    if let Some(d) = done_conf {
        scores[Action::Done.index()] = scores[Action::Done.index()].max(d.clamp(0.0, 1.0));
    }
    Ok(ActionConfidence::from_array(window.last_t().unwrap_or(0), scores))
}

/// Per-hand windows and the latest classification for each hand.
pub struct HandGestures {
    classifier: Box<dyn WindowClassifier + Send + Sync>,
    done: DoneParams,
    gap_ms: TimeMs,
    hands: Vec<HandState>,
}

#[derive(Debug, Clone, Default)]
struct HandState {
    window: GestureWindow,
    done_conf: Option<f64>,
    latest: Option<ActionConfidence>,
}

impl std::fmt::Debug for HandGestures {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HandGestures").field("hands", &self.hands.len()).finish()
    }
}

impl HandGestures {
    /// `gap_ms`: a hand whose previous frame is older than this starts a fresh
    /// window.
    pub fn new(classifier: Box<dyn WindowClassifier + Send + Sync>, done: DoneParams, gap_ms: TimeMs) -> Self {
        HandGestures {
            classifier,
            done,
            gap_ms,
            hands: Vec::new(),
        }
    }

    /// Feeds a raw frame for hand `index` and returns that hand's fresh
    /// classification once its window is full.
    pub fn push(&mut self, index: usize, frame: &HandFrame) -> Result<Option<ActionConfidence>, GestureError> {
        if self.hands.len() <= index {
            self.hands.resize_with(index + 1, HandState::default);
        }
        let norm = normalize_hand(frame)?;
        let hand = &mut self.hands[index];
        if hand.window.last_t().is_some_and(|t| frame.t_ms.saturating_sub(t) > self.gap_ms) {
            hand.window.clear();
            hand.latest = None;
        }
        hand.done_conf = Some(done_heuristic(&norm, self.done)?.conf);
        if hand.window.push(&norm)? == Readiness::NotReady {
            return Ok(None);
        }
        let acf = classify_window(&hand.window, self.classifier.as_ref(), hand.done_conf)?;
        hand.latest = Some(acf);
        Ok(Some(acf))
    }

    /// Element-wise maximum over hands whose latest classification is no
    /// older than `ttl_ms` at `now`.
    pub fn current(&self, now: TimeMs, ttl_ms: TimeMs) -> Option<ActionConfidence> {
        self.hands
            .iter()
            .filter_map(|h| h.latest)
            .filter(|a| a.t_ms <= now && now - a.t_ms <= ttl_ms)
            .reduce(|a, b| a.max(&b))
    }
}

/// Deterministic fixtures for classifier tests.
pub mod fixtures {
    use super::*;

    /// Four mutually orthogonal templates: each label owns one quarter of the
    /// feature vector.
    pub fn orthogonal_templates(len: usize) -> Vec<GestureTemplate> {
        let block = len / 4;
        Action::ALL
            .iter()
            .enumerate()
            .map(|(i, &label)| {
                let mut features = vec![0.0; len];
                for v in &mut features[i * block..(i + 1) * block] {
                    *v = 1.0;
                }
                GestureTemplate { label, features }
            })
            .collect()
    }
}

/// A kinematic hand model for generating keypoint streams.
pub mod synth {
    use std::f64::consts::PI;

    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    use super::*;

    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
    pub enum HandPose {
        /// Relaxed open hand.
        Idle,
        CatchBig,
        CatchSmall,
        Tightening,
        Done,
    }

    impl From<Action> for HandPose {
        fn from(a: Action) -> Self {
            match a {
                Action::CatchBig => HandPose::CatchBig,
                Action::CatchSmall => HandPose::CatchSmall,
                Action::Tightening => HandPose::Tightening,
                Action::Done => HandPose::Done,
            }
        }
    }

    /// Knuckle positions and segment lengths (index, middle, ring, pinky), in
    /// palm-length units with the fingers pointing along +y.
    const MCP: [[f64; 3]; 4] = [[-0.33, 0.95, 0.0], [-0.1, 1.0, 0.0], [0.13, 0.95, 0.0], [0.34, 0.85, 0.0]];
    const SEGMENTS: [[f64; 3]; 4] = [[0.45, 0.28, 0.22], [0.5, 0.3, 0.24], [0.46, 0.28, 0.22], [0.35, 0.22, 0.2]];
    const SPREAD: [f64; 4] = [-0.12, -0.03, 0.05, 0.14];
    /// Joint flexion at full curl, radians.
    const FULL_CURL: [f64; 3] = [1.5, 1.9, 1.3];
    const THUMB_CMC: [f64; 3] = [-0.32, 0.22, 0.05];
    const THUMB_SEGMENTS: [f64; 3] = [0.35, 0.3, 0.25];
    /// Wrist roll amplitude and rate while tightening.
    pub const TIGHTEN_ROLL_DEG: f64 = 40.0;
    pub const TIGHTEN_HZ: f64 = 1.5;

    #[derive(Debug, Clone, Copy)]
    enum Thumb {
        Open,
        Oppose(f64),
        PinchIndex,
    }

    fn finger_chain(finger: usize, curl: f64) -> [[f64; 3]; 4] {
        let base = MCP[finger];
        let mut pts = [base; 4];
        let mut phi = 0.0;
        let (ss, cs) = SPREAD[finger].sin_cos();
        for j in 0..3 {
            phi += curl * FULL_CURL[j];
            let d = [ss * phi.cos(), cs * phi.cos(), -phi.sin()];
            let prev = pts[j];
            pts[j + 1] = [
                prev[0] + SEGMENTS[finger][j] * d[0],
                prev[1] + SEGMENTS[finger][j] * d[1],
                prev[2] + SEGMENTS[finger][j] * d[2],
            ];
        }
        pts
    }

    fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
        [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
    }

    fn thumb_chain(mode: Thumb, index_tip: [f64; 3]) -> [[f64; 3]; 4] {
        let cmc = THUMB_CMC;
        let open = {
            let n = (0.7f64 * 0.7 + 0.7 * 0.7).sqrt();
            [-0.7 / n, 0.7 / n, 0.0]
        };
        let target = match mode {
            Thumb::Open => None,
            Thumb::Oppose(k) => {
                let across: [f64; 3] = [0.35, 0.75, -0.55];
                let n = (across[0] * across[0] + across[1] * across[1] + across[2] * across[2]).sqrt();
                let dir = lerp(open, [across[0] / n, across[1] / n, across[2] / n], k);
                let len: f64 = THUMB_SEGMENTS.iter().sum();
                Some([cmc[0] + dir[0] * len, cmc[1] + dir[1] * len, cmc[2] + dir[2] * len])
            }
            Thumb::PinchIndex => Some([index_tip[0] - 0.02, index_tip[1], index_tip[2] - 0.01]),
        };
        match target {
            None => {
                let mut pts = [cmc; 4];
                for j in 0..3 {
                    pts[j + 1] = [
                        pts[j][0] + THUMB_SEGMENTS[j] * open[0],
                        pts[j][1] + THUMB_SEGMENTS[j] * open[1],
                        pts[j][2] + THUMB_SEGMENTS[j] * open[2],
                    ];
                }
                pts
            }
            Some(tip) => {
                // bow the chain slightly outward from the straight line
                let mid_bulge = [-0.08, 0.0, 0.04];
                let mut pts = [cmc, cmc, cmc, tip];
                for (j, f) in [(1, 0.38), (2, 0.7)] {
                    let p = lerp(cmc, tip, f);
                    let b = (f * (1.0 - f)) * 4.0;
                    pts[j] = [p[0] + mid_bulge[0] * b, p[1] + mid_bulge[1] * b, p[2] + mid_bulge[2] * b];
                }
                pts
            }
        }
    }

    /// Hand-local keypoints of `pose` at `t_s` seconds into the gesture:
    /// wrist at the origin, fingers along +y, palm facing -z.
    pub fn local_points(pose: HandPose, t_s: f64) -> Vec<[f64; 3]> {
        let (curls, thumb, roll_deg) = match pose {
            HandPose::Idle => ([0.05, 0.05, 0.06, 0.08], Thumb::Open, 0.0),
            HandPose::CatchBig => ([0.42, 0.45, 0.45, 0.45], Thumb::Oppose(0.55), 0.0),
            HandPose::CatchSmall => ([0.4, 0.95, 0.95, 0.95], Thumb::PinchIndex, 0.0),
            HandPose::Tightening => (
                [0.75, 0.8, 0.8, 0.8],
                Thumb::Oppose(1.0),
                TIGHTEN_ROLL_DEG * (2.0 * PI * TIGHTEN_HZ * t_s).sin(),
            ),
            HandPose::Done => ([0.55, 0.04, 0.04, 0.06], Thumb::PinchIndex, 0.0),
        };
        let fingers: Vec<[[f64; 3]; 4]> = (0..4).map(|f| finger_chain(f, curls[f])).collect();
        let thumb_pts = thumb_chain(thumb, fingers[0][3]);
        let mut pts = Vec::with_capacity(DEFAULT_KEYPOINTS);
        pts.push([0.0, 0.0, 0.0]);
        pts.extend_from_slice(&thumb_pts);
        for f in &fingers {
            pts.extend_from_slice(f);
        }
        let (s, c) = roll_deg.to_radians().sin_cos();
        pts.iter().map(|p| [p[0] * c + p[2] * s, p[1], -p[0] * s + p[2] * c]).collect()
    }

    /// Where and how large the hand appears in the camera frame.
    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct Placement {
        /// Wrist position in normalized image coordinates.
        pub wrist: (f64, f64),
        /// Palm length in normalized image units.
        pub scale: f64,
        /// In-plane rotation of the forearm, degrees.
        pub tilt_deg: f64,
    }

    impl Default for Placement {
        fn default() -> Self {
            Placement {
                wrist: (0.5, 0.7),
                scale: 0.1,
                tilt_deg: 0.0,
            }
        }
    }

    /// Camera-frame keypoints: image y grows downward, so the hand-local +y
    /// axis maps to -y before tilting.
    pub fn place(local: &[[f64; 3]], at: Placement) -> Vec<[f64; 3]> {
        let (s, c) = at.tilt_deg.to_radians().sin_cos();
        local
            .iter()
            .map(|p| {
                let (x, y) = (p[0] * c - p[1] * s, p[0] * s + p[1] * c);
                [at.wrist.0 + at.scale * x, at.wrist.1 - at.scale * y, at.scale * p[2]]
            })
            .collect()
    }

    pub fn hand_frame<R: Rng + ?Sized>(pose: HandPose, t_ms: TimeMs, pose_t_s: f64, at: Placement, noise: f64, rng: &mut R) -> HandFrame {
        let mut points = place(&local_points(pose, pose_t_s), at);
        if noise > 0.0 {
            let n = Normal::new(0.0, noise).expect("positive sigma");
            for p in &mut points {
                for v in p.iter_mut() {
                    *v += n.sample(rng);
                }
            }
        }
        HandFrame { t_ms, points }
    }

    /// Window features of a clean, held gesture sampled at 30 fps, with the
    /// gesture clock starting at `phase_s`.
    pub fn pose_window(pose: HandPose, phase_s: f64) -> Vec<f64> {
        let mut w = GestureWindow::default();
        for i in 0..WINDOW_FRAMES {
            let t_ms = (i as u64 * 1000) / 30;
            let t_s = phase_s + i as f64 / 30.0;
            let f = HandFrame {
                t_ms,
                points: place(&local_points(pose, t_s), Placement::default()),
            };
            w.push(&normalize_hand(&f).expect("synthetic hand")).expect("keypoint count");
        }
        w.features().expect("full window")
    }

    /// One template per action, the first of each label in
    /// [`reference_templates`].
    pub fn base_templates() -> Vec<GestureTemplate> {
        Action::ALL
            .iter()
            .map(|&label| GestureTemplate {
                label,
                features: pose_window(label.into(), 0.0),
            })
            .collect()
    }

    /// The bundled template set: one window per static gesture plus several
    /// phases of the tightening roll.
    pub fn reference_templates() -> Vec<GestureTemplate> {
        let mut out = base_templates();
        let period = 1.0 / TIGHTEN_HZ;
        for k in 1..6 {
            out.push(GestureTemplate {
                label: Action::Tightening,
                features: pose_window(HandPose::Tightening, period * k as f64 / 6.0),
            });
        }
        out
    }

    /// The classifier used when no template file is supplied.
    pub fn reference_classifier() -> NearestTemplateClassifier {
        NearestTemplateClassifier::new(reference_templates())
            .expect("bundled templates are consistent")
            .centered_with(&[pose_window(HandPose::Idle, 0.0)])
    }
}
