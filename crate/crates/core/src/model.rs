//! Shared vocabulary: part taxonomy, observation types, thresholds and angle
//! arithmetic used by every other module.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Milliseconds since session start.
pub type TimeMs = u64;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid angle: {0} is not finite")]
    InvalidAngle(f64),
    #[error("unknown part class `{0}`")]
    UnknownPart(String),
    #[error("{field}: {reason}")]
    Validation { field: &'static str, reason: String },
}

impl ModelError {
    pub(crate) fn validation(field: &'static str, reason: impl Into<String>) -> Self {
        ModelError::Validation {
            field,
            reason: reason.into(),
        }
    }
}

/// The ten component classes of the hard-drive assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum PartClass {
    HDDCase,
    ActuatorArm,
    Platter,
    Screw,
    ActuatorBase,
    ActuatorCover,
    CaseCover,
    Spindle,
    LogiBoard,
    ArmElectro,
}

impl PartClass {
    pub const ALL: [PartClass; 10] = [
        PartClass::HDDCase,
        PartClass::ActuatorArm,
        PartClass::Platter,
        PartClass::Screw,
        PartClass::ActuatorBase,
        PartClass::ActuatorCover,
        PartClass::CaseCover,
        PartClass::Spindle,
        PartClass::LogiBoard,
        PartClass::ArmElectro,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PartClass::HDDCase => "HDDCase",
            PartClass::ActuatorArm => "ActuatorArm",
            PartClass::Platter => "Platter",
            PartClass::Screw => "Screw",
            PartClass::ActuatorBase => "ActuatorBase",
            PartClass::ActuatorCover => "ActuatorCover",
            PartClass::CaseCover => "CaseCover",
            PartClass::Spindle => "Spindle",
            PartClass::LogiBoard => "LogiBoard",
            PartClass::ArmElectro => "ArmElectro",
        }
    }

    /// Grasp used to pick the part up: screws and the small electro component
    /// are caught with a precision grip, everything else with a full grip.
    pub fn grasp_class(self) -> Grasp {
        match self {
            PartClass::Screw | PartClass::ArmElectro => Grasp::CatchSmall,
            _ => Grasp::CatchBig,
        }
    }
}

impl fmt::Display for PartClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PartClass {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PartClass::ALL
            .iter()
            .copied()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| ModelError::UnknownPart(s.to_string()))
    }
}

/// The two pick-up gestures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Grasp {
    CatchBig,
    CatchSmall,
}

/// The four recognised hand actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    CatchBig,
    CatchSmall,
    Tightening,
    Done,
}

impl Action {
    pub const ALL: [Action; 4] = [
        Action::CatchBig,
        Action::CatchSmall,
        Action::Tightening,
        Action::Done,
    ];

    pub fn index(self) -> usize {
        match self {
            Action::CatchBig => 0,
            Action::CatchSmall => 1,
            Action::Tightening => 2,
            Action::Done => 3,
        }
    }
}

impl From<Grasp> for Action {
    fn from(g: Grasp) -> Self {
        match g {
            Grasp::CatchBig => Action::CatchBig,
            Grasp::CatchSmall => Action::CatchSmall,
        }
    }
}

fn check_unit(field: &'static str, v: f64) -> Result<(), ModelError> {
    if v.is_finite() && (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(ModelError::validation(field, format!("{v} outside [0,1]")))
    }
}

/// One detected object: normalized center/size box, confidence and optional
/// stereo depth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDetection")]
pub struct Detection {
    pub part: PartClass,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub conf: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub depth_mm: Option<f64>,
}

#[derive(Deserialize)]
struct RawDetection {
    part: PartClass,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    conf: f64,
    #[serde(default)]
    depth_mm: Option<f64>,
}

impl TryFrom<RawDetection> for Detection {
    type Error = ModelError;

    fn try_from(r: RawDetection) -> Result<Self, Self::Error> {
        Detection::new(r.part, r.cx, r.cy, r.w, r.h, r.conf, r.depth_mm)
    }
}

impl Detection {
    pub fn new(
        part: PartClass,
        cx: f64,
        cy: f64,
        w: f64,
        h: f64,
        conf: f64,
        depth_mm: Option<f64>,
    ) -> Result<Self, ModelError> {
        let d = Detection {
            part,
            cx,
            cy,
            w,
            h,
            conf,
            depth_mm,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check_unit("cx", self.cx)?;
        check_unit("cy", self.cy)?;
        check_unit("w", self.w)?;
        check_unit("h", self.h)?;
        check_unit("conf", self.conf)?;
        if let Some(d) = self.depth_mm {
            if !(d.is_finite() && d > 0.0) {
                return Err(ModelError::validation("depth_mm", format!("{d} is not positive")));
            }
        }
        Ok(())
    }

    /// Box edges as (x0, y0, x1, y1).
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFrame {
    pub t_ms: TimeMs,
    pub detections: Vec<Detection>,
}

impl DetectionFrame {
    /// Highest-confidence detection of `part`, if any.
    pub fn best(&self, part: PartClass) -> Option<&Detection> {
        self.detections
            .iter()
            .filter(|d| d.part == part)
            .max_by(|a, b| a.conf.total_cmp(&b.conf))
    }
}

/// Per-tick confidence for each of the four actions. Components are
/// independent and need not sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionConfidence {
    pub t_ms: TimeMs,
    pub catch_big: f64,
    pub catch_small: f64,
    pub tightening: f64,
    pub done: f64,
}

impl ActionConfidence {
    pub fn from_array(t_ms: TimeMs, v: [f64; 4]) -> Self {
        ActionConfidence {
            t_ms,
            catch_big: v[0],
            catch_small: v[1],
            tightening: v[2],
            done: v[3],
        }
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.catch_big, self.catch_small, self.tightening, self.done]
    }

    pub fn get(&self, action: Action) -> f64 {
        self.to_array()[action.index()]
    }

    /// Element-wise maximum; the later timestamp wins.
    pub fn max(&self, other: &ActionConfidence) -> ActionConfidence {
        let a = self.to_array();
        let b = other.to_array();
        let mut out = [0.0; 4];
        for i in 0..4 {
            out[i] = a[i].max(b[i]);
        }
        ActionConfidence::from_array(self.t_ms.max(other.t_ms), out)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check_unit("catch_big", self.catch_big)?;
        check_unit("catch_small", self.catch_small)?;
        check_unit("tightening", self.tightening)?;
        check_unit("done", self.done)
    }
}

/// Measured orientation of the actuator arm relative to its reference pose.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjAngle {
    pub t_ms: TimeMs,
    pub degrees: f64,
    pub conf: f64,
}

impl ObjAngle {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.degrees.is_finite() && (0.0..360.0).contains(&self.degrees)) {
            return Err(ModelError::validation(
                "degrees",
                format!("{} outside [0,360)", self.degrees),
            ));
        }
        check_unit("conf", self.conf)
    }
}

/// Confidence floors, tolerances and timing windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdConfig {
    /// Minimum detection confidence.
    pub tau_det: f64,
    /// Minimum action confidence.
    pub tau_act: f64,
    pub angle_tol_deg: f64,
    pub depth_tol_mm: f64,
    pub region_rule: RegionRule,
    /// Consecutive ticks a condition must hold before a transition.
    pub hold_ticks: u32,
    pub det_ttl_ms: u64,
    pub acf_ttl_ms: u64,
    pub hole_ttl_ms: u64,
    /// Fusion clock period.
    pub tick_ms: u64,
    /// Idle time with no detections and no actions before a null-action error.
    pub null_window_ms: u64,
    /// How far back a tightening action still counts for a hole transition.
    pub action_window_ms: u64,
    /// Guidance repeat period while a correction is outstanding.
    pub guidance_repeat_ms: u64,
    /// Hole reports below this confidence are ignored.
    pub hole_min_conf: f64,
    /// Side length of the square around the wrist treated as the hand region.
    pub hand_region: f64,
    pub depth_window: usize,
    pub depth_alpha: f64,
}

/// How a detection is tested against a target region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionRule {
    /// Box center lies inside the region.
    CenterInside,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        ThresholdConfig {
            tau_det: 0.50,
            tau_act: 0.80,
            angle_tol_deg: 10.0,
            depth_tol_mm: 15.0,
            region_rule: RegionRule::CenterInside,
            hold_ticks: 10,
            det_ttl_ms: 100,
            acf_ttl_ms: 200,
            hole_ttl_ms: 500,
            tick_ms: 33,
            null_window_ms: 5_000,
            action_window_ms: 2_000,
            guidance_repeat_ms: 2_000,
            hole_min_conf: 0.3,
            hand_region: 0.25,
            depth_window: 5,
            depth_alpha: 0.3,
        }
    }
}

impl ThresholdConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("tau_det", self.tau_det),
            ("tau_act", self.tau_act),
            ("angle_tol_deg", self.angle_tol_deg),
            ("depth_tol_mm", self.depth_tol_mm),
            ("hole_min_conf", self.hole_min_conf),
            ("hand_region", self.hand_region),
            ("depth_alpha", self.depth_alpha),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ModelError::validation(field, format!("{v} must be positive")));
            }
        }
        for (field, v) in [
            ("tau_det", self.tau_det),
            ("tau_act", self.tau_act),
            ("hole_min_conf", self.hole_min_conf),
            ("depth_alpha", self.depth_alpha),
        ] {
            if v > 1.0 {
                return Err(ModelError::validation(field, format!("{v} exceeds 1")));
            }
        }
        let windows = [
            ("det_ttl_ms", self.det_ttl_ms),
            ("acf_ttl_ms", self.acf_ttl_ms),
            ("hole_ttl_ms", self.hole_ttl_ms),
            ("tick_ms", self.tick_ms),
            ("null_window_ms", self.null_window_ms),
            ("action_window_ms", self.action_window_ms),
            ("guidance_repeat_ms", self.guidance_repeat_ms),
        ];
        for (field, v) in windows {
            if v == 0 {
                return Err(ModelError::validation(field, "must be positive"));
            }
        }
        if self.hold_ticks == 0 {
            return Err(ModelError::validation("hold_ticks", "must be at least 1"));
        }
        if self.depth_window == 0 {
            return Err(ModelError::validation("depth_window", "must be at least 1"));
        }
        Ok(())
    }
}

/// Reduces a finite angle in degrees to `[0, 360)`.
pub fn canonicalize_angle(raw: f64) -> Result<f64, ModelError> {
    if !raw.is_finite() {
        return Err(ModelError::InvalidAngle(raw));
    }
    let r = raw.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    Ok(if r >= 360.0 { 0.0 } else { r })
}

/// Shortest angular distance in degrees, in `[0, 180]`.
pub fn circ_diff(a: f64, b: f64) -> Result<f64, ModelError> {
    if !a.is_finite() {
        return Err(ModelError::InvalidAngle(a));
    }
    if !b.is_finite() {
        return Err(ModelError::InvalidAngle(b));
    }
    let d = (a - b).abs().rem_euclid(360.0);
    Ok(d.min(360.0 - d))
}
