//! Scripted operator simulator that produces replay streams.
//!
//! An operator script is a sequence of hand motions (pose, start and end
//! wrist position, optionally a carried part) plus world changes at given
//! times. Rendering samples the script at 30 fps for detections, hand
//! keypoints and the object angle, and at 10 Hz for hole reports.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gesture::synth::{hand_frame, HandPose, Placement};
use crate::link::{HoleState, WireReport};
use crate::model::{canonicalize_angle, Detection, DetectionFrame, Grasp, ObjAngle, PartClass, TimeMs};
use crate::plan::{AssemblyPlan, StageKind, StageSpec};
use crate::replay::ReplayRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Happy,
    CheatScrew,
    WrongPart,
    SkipAttempt,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Happy, Scenario::CheatScrew, Scenario::WrongPart, Scenario::SkipAttempt];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Happy => "happy",
            Scenario::CheatScrew => "cheat-screw",
            Scenario::WrongPart => "wrong-part",
            Scenario::SkipAttempt => "skip-attempt",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| SimError::UnknownScenario(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("unknown scenario {0:?} (expected happy, cheat-screw, wrong-part or skip-attempt)")]
    UnknownScenario(String),
    #[error("plan cannot host scenario {scenario}: {reason}")]
    Unsupported { scenario: Scenario, reason: String },
}

/// What the script did, for checking a verifier run against it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTruth {
    pub scenario: Scenario,
    pub seed: u64,
    pub duration_ms: TimeMs,
    /// Stage whose step the fault was injected into.
    pub fault_stage: Option<u32>,
    /// Part picked up instead of the expected one.
    pub fault_part: Option<PartClass>,
    /// Hole "tightened" without a screw.
    pub fault_hole: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Simulation {
    pub records: Vec<ReplayRecord>,
    pub truth: ScenarioTruth,
}

const FRAME_NUM: u64 = 100;
const FRAME_DEN: u64 = 3;
const HOLE_PERIOD_MS: TimeMs = 100;
const REST: (f64, f64) = (0.5, 0.9);
const SCREW_BIN: (f64, f64) = (0.72, 0.86);
/// Wrist position while driving a screw.
const WORK: (f64, f64) = (0.45, 0.55);
/// A held part sits this far above the wrist in the image.
const GRIP_OFFSET: f64 = 0.09;
/// Tray slots, spaced so that the hand box around one slot never touches
/// the next.
const TRAY: [(f64, f64); 8] = [
    (0.07, 0.12),
    (0.07, 0.42),
    (0.07, 0.72),
    (0.93, 0.12),
    (0.93, 0.42),
    (0.93, 0.72),
    (0.27, 0.06),
    (0.69, 0.06),
];
const TABLE_DEPTH_MM: f64 = 660.0;
const LIFT_MM: f64 = 60.0;
const CASE: (f64, f64, f64, f64) = (0.48, 0.46, 0.56, 0.52);
const CASE_DEPTH_MM: f64 = 650.0;
const TRAY_ANGLE_DEG: f64 = 75.0;
const HAND_NOISE: f64 = 0.002;
const POS_NOISE: f64 = 0.002;
const DEPTH_NOISE_MM: f64 = 1.5;
const DEPTH_SPIKE_RATE: f64 = 0.01;
const ANGLE_NOISE_DEG: f64 = 0.7;

fn part_size(p: PartClass) -> (f64, f64) {
    match p {
        PartClass::ArmElectro => (0.05, 0.05),
        PartClass::Spindle => (0.06, 0.06),
        PartClass::CaseCover => (0.12, 0.1),
        PartClass::LogiBoard => (0.1, 0.06),
        PartClass::Screw => (0.02, 0.02),
        _ => (0.09, 0.09),
    }
}

fn grip_wrist(part_pos: (f64, f64)) -> (f64, f64) {
    (part_pos.0, part_pos.1 + GRIP_OFFSET)
}

fn grasp_pose(g: Grasp) -> HandPose {
    match g {
        Grasp::CatchBig => HandPose::CatchBig,
        Grasp::CatchSmall => HandPose::CatchSmall,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct PartState {
    pos: (f64, f64),
    depth: f64,
    angle: f64,
    visible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HoleMode {
    Hidden,
    Empty,
    InProcess,
    Assembled,
    /// Truly empty, plus spurious low-confidence Assembled reports.
    Cheat,
}

#[derive(Debug, Clone)]
enum Op {
    Place { part: PartClass, state: PartState },
    Hide(Vec<PartClass>),
    Holes(Vec<String>, HoleMode),
}

#[derive(Debug, Clone, Copy)]
struct Carry {
    part: PartClass,
    depth: (f64, f64),
    angle: (f64, f64),
}

#[derive(Debug, Clone)]
struct Seg {
    start: TimeMs,
    dur: TimeMs,
    pose: HandPose,
    /// Start of the uninterrupted run of this pose, for periodic gestures.
    pose_t0: TimeMs,
    from: (f64, f64),
    to: (f64, f64),
    carry: Option<Carry>,
}

impl Seg {
    fn progress(&self, t: TimeMs) -> f64 {
        if self.dur == 0 {
            return 1.0;
        }
        let p = (t.saturating_sub(self.start) as f64 / self.dur as f64).clamp(0.0, 1.0);
        p * p * (3.0 - 2.0 * p)
    }

    fn wrist(&self, t: TimeMs) -> (f64, f64) {
        let p = self.progress(t);
        (self.from.0 + (self.to.0 - self.from.0) * p, self.from.1 + (self.to.1 - self.from.1) * p)
    }
}

struct Script<'a> {
    rng: &'a mut ChaCha8Rng,
    t: TimeMs,
    hand: (f64, f64),
    segs: Vec<Seg>,
    ops: Vec<(TimeMs, Op)>,
    parts: BTreeMap<PartClass, PartState>,
}

impl Script<'_> {
    fn go(&mut self, nominal_ms: u64, pose: HandPose, to: (f64, f64), carry: Option<Carry>) {
        let dur = (nominal_ms as f64 * self.rng.random_range(0.92..1.08)).round() as TimeMs;
        let pose_t0 = match self.segs.last() {
            Some(s) if s.pose == pose => s.pose_t0,
            _ => self.t,
        };
        self.segs.push(Seg {
            start: self.t,
            dur,
            pose,
            pose_t0,
            from: self.hand,
            to,
            carry,
        });
        self.t += dur;
        self.hand = to;
    }

    fn wait(&mut self, nominal_ms: u64, pose: HandPose) {
        let at = self.hand;
        self.go(nominal_ms, pose, at, None);
    }

    fn op(&mut self, op: Op) {
        if let Op::Place { part, state } = &op {
            self.parts.insert(*part, *state);
        }
        self.ops.push((self.t, op));
    }

    fn state(&self, part: PartClass) -> PartState {
        self.parts[&part]
    }

    /// Fetches `part` from where it lies and sets it down at `to`.
    fn move_part(&mut self, part: PartClass, grasp: Grasp, to: (f64, f64), depth: f64, angle: f64, on_lower: Vec<Op>) {
        let from = self.state(part);
        let pose = grasp_pose(grasp);
        self.go(1500, HandPose::Idle, grip_wrist(from.pos), None);
        self.go(700, pose, grip_wrist(from.pos), None);
        let lifted = depth - LIFT_MM;
        let carry = |d: (f64, f64), a: (f64, f64)| Some(Carry { part, depth: d, angle: a });
        self.go(2700, pose, grip_wrist(to), carry((from.depth, lifted), (from.angle, angle)));
        for op in on_lower {
            self.op(op);
        }
        self.go(1000, pose, grip_wrist(to), carry((lifted, depth), (angle, angle)));
        self.go(800, pose, grip_wrist(to), carry((depth, depth), (angle, angle)));
        self.op(Op::Place {
            part,
            state: PartState {
                pos: to,
                depth,
                angle,
                visible: true,
            },
        });
        self.go(1400, HandPose::Idle, REST, None);
    }

    fn fasten(&mut self, hole: &str) {
        let screw = |d| {
            Some(Carry {
                part: PartClass::Screw,
                depth: (d, d),
                angle: (0.0, 0.0),
            })
        };
        self.go(1200, HandPose::Idle, grip_wrist(SCREW_BIN), None);
        self.go(500, HandPose::CatchSmall, grip_wrist(SCREW_BIN), None);
        self.go(1300, HandPose::CatchSmall, WORK, screw(TABLE_DEPTH_MM));
        self.go(800, HandPose::CatchSmall, WORK, screw(TABLE_DEPTH_MM));
        self.op(Op::Holes(vec![hole.to_string()], HoleMode::InProcess));
        self.wait(3000, HandPose::Tightening);
        self.op(Op::Holes(vec![hole.to_string()], HoleMode::Assembled));
        self.wait(900, HandPose::Tightening);
        self.go(1300, HandPose::Idle, REST, None);
    }

    /// Goes through the tightening motion over a hole that has no screw.
    fn fake_fasten(&mut self, hole: &str) {
        self.go(1200, HandPose::Idle, WORK, None);
        self.op(Op::Holes(vec![hole.to_string()], HoleMode::Cheat));
        self.wait(3500, HandPose::Tightening);
        self.op(Op::Holes(vec![hole.to_string()], HoleMode::Empty));
        self.go(1300, HandPose::Idle, REST, None);
        self.wait(2000, HandPose::Idle);
    }

    fn inspect(&mut self) {
        self.wait(800, HandPose::Idle);
        self.wait(1200, HandPose::Done);
        self.wait(800, HandPose::Idle);
    }
}

/// Stage with a placement whose part has a later same-grasp stand-in.
fn decoy_stage(plan: &AssemblyPlan) -> Option<(&StageSpec, PartClass, &StageSpec)> {
    let placements: Vec<&StageSpec> = plan.stages.iter().filter(|s| s.kind == StageKind::PartPlacement).collect();
    placements.iter().enumerate().find_map(|(i, s)| {
        let later = placements[i + 1..]
            .iter()
            .find(|l| l.part != s.part && l.grasp == s.grasp && l.part.is_some())?;
        Some((*s, later.part?, *later))
    })
}

fn target_center(stage: &StageSpec) -> (f64, f64) {
    stage.target.map_or(REST, |r| (r.cx, r.cy))
}

/// Renders `plan` as performed by a simulated operator. Deterministic for a
/// given `(plan, scenario, seed)`.
pub fn simulate_scenario(plan: &AssemblyPlan, scenario: Scenario, seed: u64) -> Result<Simulation, SimError> {
    let unsupported = |reason: &str| SimError::Unsupported {
        scenario,
        reason: reason.to_string(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = BTreeMap::new();
    let placeable: Vec<PartClass> = {
        let mut v = Vec::new();
        for s in &plan.stages {
            if let (StageKind::PartPlacement, Some(p)) = (s.kind, s.part) {
                if !v.contains(&p) {
                    v.push(p);
                }
            }
        }
        v
    };
    if placeable.len() > TRAY.len() {
        return Err(unsupported("more distinct parts than tray slots"));
    }
    let angled: Option<PartClass> = plan.stages.iter().find(|s| s.angle.is_some()).and_then(|s| s.part);
    let tray_of: BTreeMap<PartClass, (f64, f64)> = placeable.iter().copied().zip(TRAY).collect();
    for (&p, &pos) in &tray_of {
        parts.insert(
            p,
            PartState {
                pos,
                depth: TABLE_DEPTH_MM,
                angle: if Some(p) == angled { TRAY_ANGLE_DEG } else { 0.0 },
                visible: true,
            },
        );
    }

    // holes become visible when the part they sit on is set down
    let mut hosted: BTreeMap<u32, Vec<String>> = BTreeMap::new();
    let mut unhosted = Vec::new();
    let mut last_placement: Option<u32> = None;
    for s in &plan.stages {
        match s.kind {
            StageKind::PartPlacement => last_placement = Some(s.ordinal),
            StageKind::ScrewFastening => match last_placement {
                Some(o) => hosted.entry(o).or_default().extend(s.holes.iter().cloned()),
                None => unhosted.extend(s.holes.iter().cloned()),
            },
            _ => {}
        }
    }

    let decoy = decoy_stage(plan);
    let cheat = plan.stages.iter().find(|s| s.kind == StageKind::ScrewFastening && !s.holes.is_empty());
    let mut truth = ScenarioTruth {
        scenario,
        seed,
        duration_ms: 0,
        fault_stage: None,
        fault_part: None,
        fault_hole: None,
    };
    match scenario {
        Scenario::Happy => {}
        Scenario::CheatScrew => {
            let s = cheat.ok_or_else(|| unsupported("no screw stage"))?;
            truth.fault_stage = Some(s.ordinal);
            truth.fault_hole = Some(s.holes[0].clone());
        }
        Scenario::WrongPart | Scenario::SkipAttempt => {
            let (s, decoy_part, _) = decoy.ok_or_else(|| unsupported("no later part shares a grasp with an earlier one"))?;
            truth.fault_stage = Some(s.ordinal);
            truth.fault_part = Some(decoy_part);
        }
    }

    let mut sc = Script {
        rng: &mut rng,
        t: 0,
        hand: REST,
        segs: Vec::new(),
        ops: Vec::new(),
        parts,
    };
    if !unhosted.is_empty() {
        sc.op(Op::Holes(unhosted, HoleMode::Empty));
    }
    sc.wait(1500, HandPose::Idle);
    let mut placed: Vec<PartClass> = Vec::new();
    for stage in &plan.stages {
        match stage.kind {
            StageKind::PartPlacement => {
                let (Some(part), Some(grasp)) = (stage.part, stage.grasp) else {
                    continue;
                };
                if truth.fault_stage == Some(stage.ordinal) {
                    let (_, decoy_part, decoy_spec) = decoy.expect("checked above");
                    let home = tray_of[&decoy_part];
                    let home_angle = sc.state(decoy_part).angle;
                    if scenario == Scenario::WrongPart {
                        // picks the decoy up, holds it, then puts it back
                        let mid = ((home.0 + target_center(stage).0) / 2.0, (home.1 + target_center(stage).1) / 2.0);
                        let pose = grasp_pose(grasp);
                        let up = TABLE_DEPTH_MM - LIFT_MM;
                        let carry = |d: (f64, f64)| {
                            Some(Carry {
                                part: decoy_part,
                                depth: d,
                                angle: (home_angle, home_angle),
                            })
                        };
                        sc.go(1500, HandPose::Idle, grip_wrist(home), None);
                        sc.go(700, pose, grip_wrist(home), None);
                        sc.go(1800, pose, grip_wrist(mid), carry((TABLE_DEPTH_MM, up)));
                        sc.go(2000, pose, grip_wrist(mid), carry((up, up)));
                        sc.go(1800, pose, grip_wrist(home), carry((up, TABLE_DEPTH_MM)));
                        sc.op(Op::Place {
                            part: decoy_part,
                            state: PartState {
                                pos: home,
                                depth: TABLE_DEPTH_MM,
                                angle: home_angle,
                                visible: true,
                            },
                        });
                        sc.go(1400, HandPose::Idle, REST, None);
                    } else {
                        // sets the decoy down at its own target, then returns it
                        let depth = decoy_spec.expected_depth_mm.unwrap_or(TABLE_DEPTH_MM);
                        let angle = decoy_spec.angle.map_or(home_angle, |a| a.expected_deg + 1.5);
                        sc.move_part(decoy_part, grasp, target_center(decoy_spec), depth, angle, Vec::new());
                        sc.wait(1500, HandPose::Idle);
                        sc.move_part(decoy_part, grasp, home, TABLE_DEPTH_MM, home_angle, Vec::new());
                    }
                    sc.wait(1500, HandPose::Idle);
                }
                let jitter = (sc.rng.random_range(-0.01..0.01), sc.rng.random_range(-0.01..0.01));
                let center = target_center(stage);
                let to = (center.0 + jitter.0, center.1 + jitter.1);
                let depth = stage.expected_depth_mm.unwrap_or(TABLE_DEPTH_MM);
                let angle = stage.angle.map_or(sc.state(part).angle, |a| a.expected_deg + 1.5);
                let mut on_lower = Vec::new();
                if let Some(h) = hosted.get(&stage.ordinal) {
                    on_lower.push(Op::Holes(h.clone(), HoleMode::Empty));
                }
                if part == PartClass::CaseCover {
                    // the cover hides everything inside the case
                    let covered: Vec<String> = placed
                        .iter()
                        .filter_map(|p| plan.placement_of(*p, stage.ordinal))
                        .flat_map(|s| hosted.get(&s.ordinal).cloned().unwrap_or_default())
                        .collect();
                    on_lower.push(Op::Hide(placed.clone()));
                    on_lower.push(Op::Holes(covered, HoleMode::Hidden));
                }
                sc.move_part(part, grasp, to, depth, angle, on_lower);
                placed.push(part);
            }
            StageKind::ScrewFastening => {
                for (i, h) in stage.holes.iter().enumerate() {
                    if scenario == Scenario::CheatScrew && truth.fault_stage == Some(stage.ordinal) && i == 0 {
                        sc.fake_fasten(h);
                    }
                    sc.fasten(h);
                }
            }
            StageKind::Verification => sc.inspect(),
            StageKind::Completion => sc.wait(3000, HandPose::Idle),
        }
    }
    sc.wait(2000, HandPose::Idle);
    let end = sc.t;
    let Script { segs, ops, .. } = sc;
    truth.duration_ms = end;

    let mut initial = BTreeMap::new();
    for (&p, &pos) in &tray_of {
        initial.insert(
            p,
            PartState {
                pos,
                depth: TABLE_DEPTH_MM,
                angle: if Some(p) == angled { TRAY_ANGLE_DEG } else { 0.0 },
                visible: true,
            },
        );
    }
    let records = render(plan, &segs, &ops, initial, angled, end, &mut rng);
    Ok(Simulation { records, truth })
}

fn round_to(v: f64, step: f64) -> f64 {
    (v / step).round() * step
}

struct World {
    parts: BTreeMap<PartClass, PartState>,
    holes: BTreeMap<String, HoleMode>,
    next_op: usize,
}

impl World {
    fn advance(&mut self, ops: &[(TimeMs, Op)], t: TimeMs) {
        while let Some((at, op)) = ops.get(self.next_op) {
            if *at > t {
                break;
            }
            match op {
                Op::Place { part, state } => {
                    self.parts.insert(*part, *state);
                }
                Op::Hide(ps) => {
                    for p in ps {
                        if let Some(s) = self.parts.get_mut(p) {
                            s.visible = false;
                        }
                    }
                }
                Op::Holes(hs, mode) => {
                    for h in hs {
                        self.holes.insert(h.clone(), *mode);
                    }
                }
            }
            self.next_op += 1;
        }
    }
}

fn render(
    plan: &AssemblyPlan,
    segs: &[Seg],
    ops: &[(TimeMs, Op)],
    parts: BTreeMap<PartClass, PartState>,
    angled: Option<PartClass>,
    end: TimeMs,
    rng: &mut ChaCha8Rng,
) -> Vec<ReplayRecord> {
    let mut out = vec![ReplayRecord::Meta {
        plan_id: plan.plan_id.clone(),
        schema: crate::replay::REPLAY_SCHEMA,
        tick_ms: 33,
    }];
    let mut world = World {
        parts,
        holes: BTreeMap::new(),
        next_op: 0,
    };
    let pos_noise = Normal::new(0.0, POS_NOISE).expect("positive sigma");
    let depth_noise = Normal::new(0.0, DEPTH_NOISE_MM).expect("positive sigma");
    let angle_noise = Normal::new(0.0, ANGLE_NOISE_DEG).expect("positive sigma");
    let mut seg_i = 0;
    let mut frame = 0u64;
    let mut next_holes = 0;
    loop {
        let t_frame = frame * FRAME_NUM / FRAME_DEN;
        if t_frame > end && next_holes > end {
            break;
        }
        if next_holes < t_frame || t_frame > end {
            // hole reports from the close-range camera node
            let t = next_holes;
            world.advance(ops, t);
            let mut reports = Vec::new();
            for (hole, mode) in &world.holes {
                let mut push = |state, conf: f64| {
                    reports.push(WireReport {
                        hole: hole.clone(),
                        state,
                        conf: round_to(conf, 0.001),
                    })
                };
                match mode {
                    HoleMode::Hidden => {}
                    HoleMode::Empty => push(HoleState::Empty, rng.random_range(0.6..0.95)),
                    HoleMode::InProcess => push(HoleState::InProcess, rng.random_range(0.6..0.95)),
                    HoleMode::Assembled => push(HoleState::Assembled, rng.random_range(0.6..0.95)),
                    HoleMode::Cheat => {
                        push(HoleState::Empty, rng.random_range(0.6..0.9));
                        push(HoleState::Assembled, rng.random_range(0.1..0.29));
                    }
                }
            }
            if !reports.is_empty() {
                out.push(ReplayRecord::Holes { t_ms: t, reports });
            }
            next_holes += HOLE_PERIOD_MS;
            continue;
        }
        let t = t_frame;
        frame += 1;
        world.advance(ops, t);
        while seg_i + 1 < segs.len() && segs[seg_i].start + segs[seg_i].dur <= t {
            seg_i += 1;
        }
        let seg = &segs[seg_i];
        let wrist = seg.wrist(t);
        let carried = seg.carry.map(|c| {
            let p = seg.progress(t);
            (
                c.part,
                PartState {
                    pos: (wrist.0, wrist.1 - GRIP_OFFSET),
                    depth: c.depth.0 + (c.depth.1 - c.depth.0) * p,
                    angle: c.angle.0 + (c.angle.1 - c.angle.0) * p,
                    visible: true,
                },
            )
        });

        let mut shown: Vec<(PartClass, PartState)> = world
            .parts
            .iter()
            .filter(|(p, s)| s.visible && carried.is_none_or(|c| c.0 != **p))
            .map(|(p, s)| (*p, *s))
            .collect();
        shown.extend(carried);
        let mut detections = vec![Detection::new(PartClass::HDDCase, CASE.0, CASE.1, CASE.2, CASE.3, round_to(rng.random_range(0.9..0.98), 0.001), Some(CASE_DEPTH_MM)).expect("case box is valid")];
        detections.push(
            Detection::new(PartClass::Screw, SCREW_BIN.0, SCREW_BIN.1, 0.02, 0.02, round_to(rng.random_range(0.8..0.95), 0.001), None).expect("bin box is valid"),
        );
        let mut angle_rec = None;
        for (part, s) in &shown {
            let (w, h) = part_size(*part);
            let cx = round_to((s.pos.0 + pos_noise.sample(rng)).clamp(0.0, 1.0), 1e-4);
            let cy = round_to((s.pos.1 + pos_noise.sample(rng)).clamp(0.0, 1.0), 1e-4);
            let depth = (*part != PartClass::Screw).then(|| {
                let mut d = s.depth + depth_noise.sample(rng);
                if rng.random_bool(DEPTH_SPIKE_RATE) {
                    let spike = rng.random_range(150.0..300.0);
                    d += if rng.random_bool(0.5) { spike } else { -spike };
                }
                round_to(d, 0.1)
            });
            let conf = round_to(rng.random_range(0.82..0.97), 0.001);
            detections.push(Detection::new(*part, cx, cy, w, h, conf, depth).expect("simulated box is valid"));
            if Some(*part) == angled {
                let deg = canonicalize_angle(s.angle + angle_noise.sample(rng)).expect("finite angle");
                angle_rec = Some(ObjAngle {
                    t_ms: t,
                    degrees: round_to(deg, 0.01) % 360.0,
                    conf: round_to(rng.random_range(0.8..0.95), 0.001),
                });
            }
        }
        out.push(ReplayRecord::Det(DetectionFrame { t_ms: t, detections }));

        let pose_t_s = t.saturating_sub(seg.pose_t0) as f64 / 1000.0;
        let at = Placement {
            wrist,
            scale: 0.1,
            tilt_deg: 0.0,
        };
        let mut hand = hand_frame(seg.pose, t, pose_t_s, at, HAND_NOISE, rng);
        for p in &mut hand.points {
            for v in p.iter_mut() {
                *v = round_to(*v, 1e-4);
            }
        }
        out.push(ReplayRecord::Hand { hand_index: 0, frame: hand });
        if let Some(a) = angle_rec {
            out.push(ReplayRecord::Angle(a));
        }
    }
    out
}
