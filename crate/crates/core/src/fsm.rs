//! The stage-verification state machine.
//!
//! [`step`] is a pure transition over one fused observation. It never moves
//! more than one stage per call and emits a [`VerifierEvent::Guidance`]
//! immediately after every [`VerifierEvent::ErrorDetected`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::link::HoleState;
use crate::model::{circ_diff, Action, ActionConfidence, Detection, DetectionFrame, Grasp, ObjAngle, PartClass, ThresholdConfig, TimeMs};
use crate::plan::{AssemblyPlan, Region, StageKind, StageSpec};

pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    PartAssembly,
    PartAssemblyCorrection,
    PartVerification,
    ScrewAssembly,
    ScrewAssemblyCorrection,
    StageComplete,
    Final,
}

impl Phase {
    pub fn is_correction(self) -> bool {
        matches!(self, Phase::PartAssemblyCorrection | Phase::ScrewAssemblyCorrection)
    }
}

/// Which inputs were too old to use at this tick.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Staleness {
    pub detections: bool,
    pub acf: bool,
    pub angle: bool,
    pub hands: bool,
    pub holes: bool,
}

/// Everything known at one tick. Absent sources are `None`, never zero.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FusedObservation {
    pub tick_ms: TimeMs,
    pub detections: Option<DetectionFrame>,
    /// Filtered depth for parts present in `detections`.
    pub depth: BTreeMap<PartClass, f64>,
    pub acf: Option<ActionConfidence>,
    pub obj_angle: Option<ObjAngle>,
    /// Consolidated state per hole id; missing ids read as Unknown.
    pub holes: BTreeMap<String, HoleState>,
    /// Wrist positions of the currently tracked hands.
    pub wrists: Vec<(f64, f64)>,
    pub stale: Staleness,
}

impl FusedObservation {
    pub fn empty(tick_ms: TimeMs) -> Self {
        FusedObservation {
            tick_ms,
            ..Default::default()
        }
    }

    pub fn hole(&self, id: &str) -> HoleState {
        self.holes.get(id).copied().unwrap_or(HoleState::Unknown)
    }

    fn act(&self, a: Action) -> Option<f64> {
        self.acf.map(|c| c.get(a))
    }

    fn best(&self, part: PartClass, tau_det: f64) -> Option<&Detection> {
        self.detections
            .as_ref()
            .and_then(|f| f.best(part))
            .filter(|d| d.conf >= tau_det)
    }

    /// Neither detections nor actions: nothing the operator did is visible.
    pub fn is_null(&self) -> bool {
        self.detections.is_none() && self.acf.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementFault {
    Position,
    Depth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorKind {
    WrongPart,
    WrongPlacement,
    WrongAngle,
    ScrewNotTightened,
    NullAction,
    CameraOffline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ErrorDetail {
    WrongPart {
        expected: PartClass,
        got: PartClass,
    },
    WrongPlacement {
        part: PartClass,
        fault: PlacementFault,
        measured_cx: f64,
        measured_cy: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        measured_depth_mm: Option<f64>,
    },
    WrongAngle {
        part: PartClass,
        measured: f64,
        expected: f64,
        tol: f64,
    },
    ScrewNotTightened {
        hole: String,
    },
    NullAction {
        idle_ms: TimeMs,
    },
    CameraOffline {
        holes: Vec<String>,
    },
}

impl ErrorDetail {
    pub fn kind(&self) -> ErrorKind {
        match self {
            ErrorDetail::WrongPart { .. } => ErrorKind::WrongPart,
            ErrorDetail::WrongPlacement { .. } => ErrorKind::WrongPlacement,
            ErrorDetail::WrongAngle { .. } => ErrorKind::WrongAngle,
            ErrorDetail::ScrewNotTightened { .. } => ErrorKind::ScrewNotTightened,
            ErrorDetail::NullAction { .. } => ErrorKind::NullAction,
            ErrorDetail::CameraOffline { .. } => ErrorKind::CameraOffline,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum VerifierEvent {
    StageEntered {
        ordinal: u32,
    },
    StageCompleted {
        ordinal: u32,
        duration_ms: TimeMs,
    },
    ErrorDetected {
        stage: u32,
        detail: ErrorDetail,
    },
    Guidance {
        text_key: String,
        stage: u32,
        parameters: BTreeMap<String, Value>,
    },
    AssemblyComplete {
        total_ms: TimeMs,
    },
}

#[derive(Debug, Error, PartialEq)]
pub enum FsmError {
    #[error("state refers to stage {0}, which the plan does not have")]
    InconsistentState(u32),
    #[error("plan has no stages")]
    EmptyPlan,
    #[error("snapshot: {0}")]
    Snapshot(String),
}

fn region_json(r: &Region) -> Value {
    json!({"cx": r.cx, "cy": r.cy, "w": r.w, "h": r.h})
}

/// Deterministic operator guidance for an error at `stage`.
pub fn guidance_text(detail: &ErrorDetail, stage: &StageSpec, plan: &AssemblyPlan) -> VerifierEvent {
    let mut p = BTreeMap::new();
    let key = match detail {
        ErrorDetail::WrongPart { expected, got } => {
            p.insert("expected".into(), json!(expected));
            p.insert("got".into(), json!(got));
            "guidance.wrong_part"
        }
        ErrorDetail::WrongPlacement { part, fault, .. } => {
            p.insert("part".into(), json!(part));
            p.insert("fault".into(), json!(fault));
            let spec = if stage.part == Some(*part) {
                Some(stage)
            } else {
                plan.placement_of(*part, stage.ordinal)
            };
            if let Some(t) = spec.and_then(|s| s.target.as_ref()) {
                p.insert("target".into(), region_json(t));
            }
            if let Some(d) = spec.and_then(|s| s.expected_depth_mm) {
                p.insert("expected_depth_mm".into(), json!(d));
            }
            "guidance.reposition_part"
        }
        ErrorDetail::WrongAngle {
            part,
            measured,
            expected,
            tol,
        } => {
            p.insert("part".into(), json!(part));
            p.insert("measured".into(), json!(measured));
            p.insert("expected".into(), json!(expected));
            p.insert("tol".into(), json!(tol));
            "guidance.rotate_part"
        }
        ErrorDetail::ScrewNotTightened { hole } => {
            p.insert("hole".into(), json!(hole));
            "guidance.retighten"
        }
        ErrorDetail::NullAction { idle_ms } => {
            p.insert("idle_ms".into(), json!(idle_ms));
            p.insert("stage_id".into(), json!(stage.id));
            "guidance.start_action"
        }
        ErrorDetail::CameraOffline { holes } => {
            p.insert("holes".into(), json!(holes));
            "guidance.check_camera"
        }
    };
    VerifierEvent::Guidance {
        text_key: key.into(),
        stage: stage.ordinal,
        parameters: p,
    }
}

/// Progress of the current tightening gesture.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TighteningTrack {
    pub active: bool,
    /// Consecutive ticks above (while inactive) or below (while active) the
    /// action floor.
    pub edge_counter: u32,
    pub last_seen_ms: Option<TimeMs>,
    pub target_hole: Option<String>,
    pub completed_during: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifierState {
    pub stage_ordinal: u32,
    pub phase: Phase,
    pub hold_counter: u32,
    /// Consecutive ticks the current fault condition has held.
    pub fault_counter: u32,
    /// Part seen in the hand during a wrong-part episode.
    pub fault_part: Option<PartClass>,
    /// An error for the current fault episode was already emitted.
    pub fault_reported: bool,
    pub pending_error: Option<ErrorDetail>,
    pub last_guidance_ms: Option<TimeMs>,
    pub holes_done: BTreeSet<String>,
    pub tightening: TighteningTrack,
    pub camera_offline: bool,
    pub stage_entered_ms: TimeMs,
    pub started_ms: TimeMs,
    pub last_activity_ms: TimeMs,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    version: u32,
    state: VerifierState,
}

fn entry_phase(kind: StageKind) -> Phase {
    match kind {
        StageKind::PartPlacement => Phase::PartAssembly,
        StageKind::ScrewFastening => Phase::ScrewAssembly,
        StageKind::Verification => Phase::PartVerification,
        StageKind::Completion => Phase::StageComplete,
    }
}

impl VerifierState {
    /// Enters stage 1 at time `t`.
    pub fn start(plan: &AssemblyPlan, t: TimeMs) -> Result<(VerifierState, Vec<VerifierEvent>), FsmError> {
        let first = plan.stage(1).ok_or(FsmError::EmptyPlan)?;
        let s = VerifierState {
            stage_ordinal: 1,
            phase: entry_phase(first.kind),
            hold_counter: 0,
            fault_counter: 0,
            fault_part: None,
            fault_reported: false,
            pending_error: None,
            last_guidance_ms: None,
            holes_done: BTreeSet::new(),
            tightening: TighteningTrack::default(),
            camera_offline: false,
            stage_entered_ms: t,
            started_ms: t,
            last_activity_ms: t,
        };
        Ok((s, vec![VerifierEvent::StageEntered { ordinal: 1 }]))
    }

    pub fn is_final(&self) -> bool {
        self.phase == Phase::Final
    }

    pub fn to_snapshot_json(&self) -> String {
        serde_json::to_string(&Snapshot {
            version: SNAPSHOT_VERSION,
            state: self.clone(),
        })
        .expect("state serializes")
    }

    pub fn from_snapshot_json(text: &str) -> Result<Self, FsmError> {
        let s: Snapshot = serde_json::from_str(text).map_err(|e| FsmError::Snapshot(e.to_string()))?;
        if s.version != SNAPSHOT_VERSION {
            return Err(FsmError::Snapshot(format!("unsupported snapshot version {}", s.version)));
        }
        Ok(s.state)
    }

    fn reset_stage_tracking(&mut self) {
        self.hold_counter = 0;
        self.fault_counter = 0;
        self.fault_part = None;
        self.fault_reported = false;
        self.pending_error = None;
        self.last_guidance_ms = None;
        self.holes_done.clear();
        self.tightening = TighteningTrack::default();
        self.camera_offline = false;
    }

    fn set_phase(&mut self, phase: Phase) {
        self.phase = phase;
        self.hold_counter = 0;
        self.fault_counter = 0;
        self.fault_part = None;
        self.fault_reported = false;
    }
}

/// Outcome of checking placement of one part.
#[derive(Debug, Clone, PartialEq)]
enum Check {
    Satisfied,
    Violated(ErrorDetail),
    Unverifiable,
}

fn wrist_box_hits(det: &Detection, wrists: &[(f64, f64)], side: f64) -> bool {
    let (x0, y0, x1, y1) = det.bounds();
    wrists.iter().any(|&(wx, wy)| {
        let h = side / 2.0;
        x0 <= wx + h && x1 >= wx - h && y0 <= wy + h && y1 >= wy - h
    })
}

fn in_hand(obs: &FusedObservation, det: &Detection, cfg: &ThresholdConfig) -> bool {
    obs.wrists.is_empty() || wrist_box_hits(det, &obs.wrists, cfg.hand_region)
}

fn grasp_holds(obs: &FusedObservation, part: PartClass, grasp: Grasp, cfg: &ThresholdConfig) -> bool {
    let Some(det) = obs.best(part, cfg.tau_det) else {
        return false;
    };
    obs.act(grasp.into()).is_some_and(|c| c >= cfg.tau_act) && in_hand(obs, det, cfg)
}

fn released(obs: &FusedObservation, grasp: Grasp, cfg: &ThresholdConfig) -> bool {
    obs.act(grasp.into()).is_none_or(|c| c < cfg.tau_act)
}

/// A part other than the expected one being held.
fn wrong_part_in_hand(obs: &FusedObservation, stage: &StageSpec, plan: &AssemblyPlan, cfg: &ThresholdConfig) -> Option<PartClass> {
    if obs.wrists.is_empty() {
        return None;
    }
    let expected = stage.part?;
    let frame = obs.detections.as_ref()?;
    let correct_held = obs
        .best(expected, cfg.tau_det)
        .is_some_and(|d| wrist_box_hits(d, &obs.wrists, cfg.hand_region));
    if correct_held {
        return None;
    }
    let installed = plan.installed_before(stage.ordinal);
    PartClass::ALL.into_iter().find(|&p| {
        if p == expected || p == PartClass::HDDCase || p == PartClass::Screw || installed.contains(&p) {
            return false;
        }
        let Some(d) = frame.best(p).filter(|d| d.conf >= cfg.tau_det) else {
            return false;
        };
        wrist_box_hits(d, &obs.wrists, cfg.hand_region) && obs.act(p.grasp_class().into()).is_some_and(|c| c >= cfg.tau_act)
    })
}

/// Checks `part` against the placement spec `spec`.
fn placement_check(obs: &FusedObservation, part: PartClass, spec: Option<&StageSpec>, cfg: &ThresholdConfig) -> Check {
    let Some(det) = obs.best(part, cfg.tau_det) else {
        return Check::Unverifiable;
    };
    let Some(spec) = spec else {
        // nothing placed it, so presence is all that can be asked
        return Check::Satisfied;
    };
    let depth = obs.depth.get(&part).copied();
    let position_fault = |fault| ErrorDetail::WrongPlacement {
        part,
        fault,
        measured_cx: det.cx,
        measured_cy: det.cy,
        measured_depth_mm: depth,
    };
    if let Some(target) = &spec.target {
        if !target.contains(det.cx, det.cy) {
            return Check::Violated(position_fault(PlacementFault::Position));
        }
    }
    if let Some(expected) = spec.expected_depth_mm {
        match depth {
            None => return Check::Unverifiable,
            Some(d) if (d - expected).abs() > cfg.depth_tol_mm => return Check::Violated(position_fault(PlacementFault::Depth)),
            Some(_) => {}
        }
    }
    if let Some(c) = &spec.angle {
        let Some(a) = obs.obj_angle else {
            return Check::Unverifiable;
        };
        let diff = circ_diff(a.degrees, c.expected_deg).unwrap_or(f64::INFINITY);
        if diff > c.tol_deg {
            return Check::Violated(ErrorDetail::WrongAngle {
                part,
                measured: a.degrees,
                expected: c.expected_deg,
                tol: c.tol_deg,
            });
        }
    }
    Check::Satisfied
}

struct Ctx<'a> {
    obs: &'a FusedObservation,
    stage: &'a StageSpec,
    plan: &'a AssemblyPlan,
    cfg: &'a ThresholdConfig,
    events: Vec<VerifierEvent>,
}

impl Ctx<'_> {
    fn error(&mut self, s: &mut VerifierState, detail: ErrorDetail) {
        let g = guidance_text(&detail, self.stage, self.plan);
        self.events.push(VerifierEvent::ErrorDetected {
            stage: self.stage.ordinal,
            detail: detail.clone(),
        });
        self.events.push(g);
        s.pending_error = Some(detail);
        s.last_guidance_ms = Some(self.obs.tick_ms);
    }
}

fn bump(counter: &mut u32, cond: bool, cap: u32) -> bool {
    if cond {
        *counter = (*counter + 1).min(cap);
    } else {
        *counter = 0;
    }
    *counter >= cap
}

/// One transition. Pure: the inputs are never modified.
pub fn step(
    state: &VerifierState,
    obs: &FusedObservation,
    plan: &AssemblyPlan,
    cfg: &ThresholdConfig,
) -> Result<(VerifierState, Vec<VerifierEvent>), FsmError> {
    let stage = plan
        .stage(state.stage_ordinal)
        .ok_or(FsmError::InconsistentState(state.stage_ordinal))?;
    let mut s = state.clone();
    let mut cx = Ctx {
        obs,
        stage,
        plan,
        cfg,
        events: Vec::new(),
    };
    let t = obs.tick_ms;

    match s.phase {
        Phase::Final => return Ok((s, cx.events)),
        Phase::StageComplete => {
            cx.events.push(VerifierEvent::StageCompleted {
                ordinal: s.stage_ordinal,
                duration_ms: t.saturating_sub(s.stage_entered_ms),
            });
            if s.stage_ordinal >= plan.len() {
                s.set_phase(Phase::Final);
                cx.events.push(VerifierEvent::AssemblyComplete {
                    total_ms: t.saturating_sub(s.started_ms),
                });
            } else {
                let next = plan
                    .stage(s.stage_ordinal + 1)
                    .ok_or(FsmError::InconsistentState(s.stage_ordinal + 1))?;
                s.stage_ordinal = next.ordinal;
                s.stage_entered_ms = t;
                s.last_activity_ms = t;
                s.reset_stage_tracking();
                s.set_phase(entry_phase(next.kind));
                cx.events.push(VerifierEvent::StageEntered { ordinal: next.ordinal });
            }
            return Ok((s, cx.events));
        }
        _ => {}
    }

    if obs.is_null() {
        if s.phase.is_correction() {
            repeat_guidance(&mut s, &mut cx);
        } else {
            let idle = t.saturating_sub(s.last_activity_ms);
            if idle >= cfg.null_window_ms {
                cx.error(&mut s, ErrorDetail::NullAction { idle_ms: idle });
                s.last_activity_ms = t;
            }
        }
        return Ok((s, cx.events));
    }
    s.last_activity_ms = t;

    match s.phase {
        Phase::PartAssembly => part_assembly(&mut s, &mut cx),
        Phase::PartAssemblyCorrection => part_correction(&mut s, &mut cx),
        Phase::PartVerification => match stage.kind {
            StageKind::Verification => verification_stage(&mut s, &mut cx),
            _ => part_verification(&mut s, &mut cx),
        },
        Phase::ScrewAssembly => screw_assembly(&mut s, &mut cx),
        Phase::ScrewAssemblyCorrection => screw_correction(&mut s, &mut cx),
        Phase::StageComplete | Phase::Final => unreachable!("handled above"),
    }
    Ok((s, cx.events))
}

fn repeat_guidance(s: &mut VerifierState, cx: &mut Ctx<'_>) {
    let Some(err) = &s.pending_error else { return };
    let due = s
        .last_guidance_ms
        .is_none_or(|g| cx.obs.tick_ms.saturating_sub(g) >= cx.cfg.guidance_repeat_ms);
    if due {
        cx.events.push(guidance_text(err, cx.stage, cx.plan));
        s.last_guidance_ms = Some(cx.obs.tick_ms);
    }
}

fn part_assembly(s: &mut VerifierState, cx: &mut Ctx<'_>) {
    let (Some(part), Some(grasp)) = (cx.stage.part, cx.stage.grasp) else {
        // a placement stage without part or grasp fails plan validation
        return;
    };
    let cap = cx.cfg.hold_ticks;
    if bump(&mut s.hold_counter, grasp_holds(cx.obs, part, grasp, cx.cfg), cap) {
        s.set_phase(Phase::PartVerification);
        return;
    }
    let wrong = wrong_part_in_hand(cx.obs, cx.stage, cx.plan, cx.cfg);
    if wrong.is_some() && wrong != s.fault_part {
        s.fault_counter = 0;
    }
    s.fault_part = wrong;
    if bump(&mut s.fault_counter, wrong.is_some(), cap) {
        let got = wrong.expect("counter only fills while a part is held");
        cx.error(s, ErrorDetail::WrongPart { expected: part, got });
        s.set_phase(Phase::PartAssemblyCorrection);
    }
}

fn part_correction(s: &mut VerifierState, cx: &mut Ctx<'_>) {
    let (Some(part), Some(grasp)) = (cx.stage.part, cx.stage.grasp) else {
        return;
    };
    let regrasped = grasp_holds(cx.obs, part, grasp, cx.cfg);
    let placed_right = matches!(s.pending_error, Some(ErrorDetail::WrongPlacement { .. } | ErrorDetail::WrongAngle { .. }))
        && placement_check(cx.obs, part, Some(cx.stage), cx.cfg) == Check::Satisfied;
    if bump(&mut s.hold_counter, regrasped || placed_right, cx.cfg.hold_ticks) {
        s.pending_error = None;
        s.set_phase(Phase::PartVerification);
        return;
    }
    repeat_guidance(s, cx);
}

fn part_verification(s: &mut VerifierState, cx: &mut Ctx<'_>) {
    let (Some(part), Some(grasp)) = (cx.stage.part, cx.stage.grasp) else {
        return;
    };
    let cap = cx.cfg.hold_ticks;
    match placement_check(cx.obs, part, Some(cx.stage), cx.cfg) {
        Check::Satisfied => {
            s.fault_counter = 0;
            if bump(&mut s.hold_counter, true, cap) {
                s.set_phase(if cx.stage.holes.is_empty() {
                    Phase::StageComplete
                } else {
                    Phase::ScrewAssembly
                });
            }
        }
        Check::Violated(detail) => {
            s.hold_counter = 0;
            let counts = released(cx.obs, grasp, cx.cfg);
            if bump(&mut s.fault_counter, counts, cap) {
                cx.error(s, detail);
                s.set_phase(Phase::PartAssemblyCorrection);
            }
        }
        Check::Unverifiable => {
            s.hold_counter = 0;
            s.fault_counter = 0;
        }
    }
}

fn verification_stage(s: &mut VerifierState, cx: &mut Ctx<'_>) {
    let mut violations = Vec::new();
    let mut unverifiable = false;
    for &part in &cx.stage.verify_parts {
        let spec = cx.plan.placement_of(part, cx.stage.ordinal);
        match placement_check(cx.obs, part, spec, cx.cfg) {
            Check::Satisfied => {}
            Check::Violated(d) => violations.push(d),
            Check::Unverifiable => unverifiable = true,
        }
    }
    let mut offline = Vec::new();
    for h in &cx.stage.holes {
        match cx.obs.hole(h) {
            HoleState::Assembled => {}
            HoleState::Unknown => offline.push(h.clone()),
            HoleState::Empty | HoleState::InProcess => violations.push(ErrorDetail::ScrewNotTightened { hole: h.clone() }),
        }
    }
    camera_episode(s, cx, offline);
    let cap = cx.cfg.hold_ticks;
    if violations.is_empty() && !unverifiable && !s.camera_offline {
        s.fault_counter = 0;
        s.fault_reported = false;
        if bump(&mut s.hold_counter, true, cap) {
            s.set_phase(Phase::StageComplete);
        }
        return;
    }
    s.hold_counter = 0;
    if bump(&mut s.fault_counter, !violations.is_empty(), cap) && !s.fault_reported {
        for v in violations {
            cx.error(s, v);
        }
        s.fault_reported = true;
    }
}

/// Emits CameraOffline once when some listed hole goes Unknown, and clears
/// the flag once every hole is known again.
fn camera_episode(s: &mut VerifierState, cx: &mut Ctx<'_>, offline: Vec<String>) {
    if offline.is_empty() {
        s.camera_offline = false;
    } else if !s.camera_offline {
        s.camera_offline = true;
        let keep = s.pending_error.clone();
        cx.error(s, ErrorDetail::CameraOffline { holes: offline });
        // an outage does not replace the error a correction is waiting on
        if keep.is_some() {
            s.pending_error = keep;
        }
    }
}

/// Updates the debounced tightening gesture. Returns true on the tick the
/// gesture ends.
fn track_tightening(s: &mut VerifierState, cx: &Ctx<'_>, unfinished: &[String]) -> bool {
    let t = cx.obs.tick_ms;
    let above = cx.obs.act(Action::Tightening).is_some_and(|c| c >= cx.cfg.tau_act);
    let cap = cx.cfg.hold_ticks;
    let tr = &mut s.tightening;
    if above {
        tr.last_seen_ms = Some(t);
    }
    if !tr.active {
        if bump(&mut tr.edge_counter, above, cap) {
            tr.active = true;
            tr.edge_counter = 0;
            tr.completed_during = false;
            tr.target_hole = unfinished
                .iter()
                .find(|h| cx.obs.hole(h) == HoleState::InProcess)
                .or(unfinished.first())
                .cloned();
        }
        false
    } else if bump(&mut tr.edge_counter, !above, cap) {
        tr.active = false;
        tr.edge_counter = 0;
        true
    } else {
        false
    }
}

fn recently_tightened(s: &VerifierState, cx: &Ctx<'_>) -> bool {
    s.tightening
        .last_seen_ms
        .is_some_and(|seen| cx.obs.tick_ms.saturating_sub(seen) <= cx.cfg.action_window_ms)
}

fn screw_assembly(s: &mut VerifierState, cx: &mut Ctx<'_>) {
    let unfinished: Vec<String> = cx.stage.holes.iter().filter(|h| !s.holes_done.contains(*h)).cloned().collect();
    let offline: Vec<String> = unfinished.iter().filter(|h| cx.obs.hole(h) == HoleState::Unknown).cloned().collect();
    let ended = track_tightening(s, cx, &unfinished);
    camera_episode(s, cx, offline);
    if s.camera_offline {
        // hold: no progress and no failure while the hole camera is blind
        return;
    }
    if recently_tightened(s, cx) {
        for h in &unfinished {
            if cx.obs.hole(h) == HoleState::Assembled {
                s.holes_done.insert(h.clone());
                s.tightening.completed_during = true;
            }
        }
    }
    if cx.stage.holes.iter().all(|h| s.holes_done.contains(h)) {
        s.set_phase(Phase::StageComplete);
        return;
    }
    if ended && !s.tightening.completed_during {
        let hole = s
            .tightening
            .target_hole
            .clone()
            .or_else(|| unfinished.first().cloned())
            .unwrap_or_default();
        cx.error(s, ErrorDetail::ScrewNotTightened { hole });
        s.set_phase(Phase::ScrewAssemblyCorrection);
    }
}

fn screw_correction(s: &mut VerifierState, cx: &mut Ctx<'_>) {
    let unfinished: Vec<String> = cx.stage.holes.iter().filter(|h| !s.holes_done.contains(*h)).cloned().collect();
    track_tightening(s, cx, &unfinished);
    let failed = match &s.pending_error {
        Some(ErrorDetail::ScrewNotTightened { hole }) => Some(hole.clone()),
        _ => None,
    };
    let offline: Vec<String> = failed.iter().filter(|h| cx.obs.hole(h) == HoleState::Unknown).cloned().collect();
    camera_episode(s, cx, offline);
    if let Some(h) = failed {
        if cx.obs.hole(&h) == HoleState::Assembled && recently_tightened(s, cx) {
            s.holes_done.insert(h);
            s.pending_error = None;
            s.tightening.completed_during = true;
            s.set_phase(Phase::ScrewAssembly);
            return;
        }
    }
    repeat_guidance(s, cx);
}
