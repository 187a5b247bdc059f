//! Orchestration: fuses the input streams onto the tick grid, drives the
//! verifier and keeps the event log and operation report.

mod fuse;
mod report;
pub mod sim;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fsm::{step, FsmError, Phase, Staleness, VerifierEvent, VerifierState};
use crate::gesture::synth::reference_classifier;
use crate::gesture::WindowClassifier;
use crate::link::{HoleReport, HoleSummary, LinkMessage};
use crate::model::{ModelError, ThresholdConfig, TimeMs};
use crate::plan::AssemblyPlan;
use crate::replay::{ReplayFormatError, ReplayReader, ReplayRecord};

pub use fuse::{fuse_tick, snap_to_grid, InputBuffers};
pub use report::{Acknowledgment, ErrorRecord, OperationReport, Outcome, StageRecord, Totals};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Format(#[from] ReplayFormatError),
    #[error("replay was recorded for plan {replay:?}, not {plan:?}")]
    PlanMismatch { replay: String, plan: String },
    #[error("invalid configuration: {0}")]
    Config(#[from] ModelError),
    #[error(transparent)]
    Fsm(#[from] FsmError),
}

/// A verifier event with its id and tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub event_id: u64,
    pub t_ms: TimeMs,
    #[serde(flatten)]
    pub event: VerifierEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ControlCommand {
    Pause,
    Resume,
    AbortSession,
    AcknowledgeGuidance { event_id: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ControlError {
    #[error("session has already ended")]
    Ended,
    #[error("event {0} is not a guidance event")]
    NotGuidance(u64),
}

/// Read-only view served to dashboards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub stage_ordinal: u32,
    pub stage_id: String,
    pub phase: Phase,
    pub holes: BTreeMap<String, HoleSummary>,
    pub last_guidance: Option<LoggedEvent>,
    pub paused: bool,
    pub outcome: Outcome,
    pub last_tick_ms: Option<TimeMs>,
    pub stale: Staleness,
}

/// Owns every piece of mutable session state. Inputs arrive through
/// [`Engine::ingest`]; the clock advances only through [`Engine::tick`].
pub struct Engine {
    plan: AssemblyPlan,
    cfg: ThresholdConfig,
    inputs: InputBuffers,
    state: VerifierState,
    paused_since: Option<TimeMs>,
    log: Vec<LoggedEvent>,
    report: OperationReport,
    last_tick: Option<TimeMs>,
    stale: Staleness,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine")
            .field("stage", &self.state.stage_ordinal)
            .field("phase", &self.state.phase)
            .field("events", &self.log.len())
            .finish()
    }
}

impl Engine {
    /// Starts stage 1 at `start_ms`.
    pub fn new(
        plan: AssemblyPlan,
        cfg: ThresholdConfig,
        classifier: Box<dyn WindowClassifier + Send + Sync>,
        session_id: String,
        start_ms: TimeMs,
    ) -> Result<Self, SessionError> {
        cfg.validate()?;
        let (state, events) = VerifierState::start(&plan, start_ms)?;
        let report = OperationReport::new(session_id, &plan, start_ms);
        let inputs = InputBuffers::new(&cfg, classifier);
        let mut engine = Engine {
            plan,
            cfg,
            inputs,
            state,
            paused_since: None,
            log: Vec::new(),
            report,
            last_tick: None,
            stale: Staleness::default(),
        };
        engine.record(start_ms, events);
        Ok(engine)
    }

    /// Same as [`Engine::new`] with the bundled gesture classifier.
    pub fn with_reference_classifier(plan: AssemblyPlan, cfg: ThresholdConfig, session_id: String, start_ms: TimeMs) -> Result<Self, SessionError> {
        Self::new(plan, cfg, Box::new(reference_classifier()), session_id, start_ms)
    }

    fn record(&mut self, t_ms: TimeMs, events: Vec<VerifierEvent>) -> usize {
        let n = events.len();
        for event in events {
            let logged = LoggedEvent {
                event_id: self.log.len() as u64 + 1,
                t_ms,
                event,
            };
            self.report.observe(&logged, &self.plan);
            self.log.push(logged);
        }
        n
    }

    pub fn plan(&self) -> &AssemblyPlan {
        &self.plan
    }

    pub fn config(&self) -> &ThresholdConfig {
        &self.cfg
    }

    pub fn state(&self) -> &VerifierState {
        &self.state
    }

    pub fn events(&self) -> &[LoggedEvent] {
        &self.log
    }

    pub fn events_after(&self, event_id: u64) -> &[LoggedEvent] {
        let from = (event_id as usize).min(self.log.len());
        &self.log[from..]
    }

    pub fn report(&self) -> &OperationReport {
        &self.report
    }

    pub fn is_paused(&self) -> bool {
        self.paused_since.is_some()
    }

    /// Complete or aborted.
    pub fn is_finished(&self) -> bool {
        self.report.outcome != Outcome::InProgress
    }

    pub fn inputs(&self) -> &InputBuffers {
        &self.inputs
    }

    /// Buffers one record. `meta` records are ignored.
    pub fn ingest(&mut self, rec: &ReplayRecord) {
        match rec {
            ReplayRecord::Meta { .. } => {}
            ReplayRecord::Det(f) => self.inputs.push_detections(f.clone()),
            ReplayRecord::Hand { hand_index, frame } => self.inputs.push_hand(*hand_index, frame),
            ReplayRecord::Angle(a) => self.inputs.push_angle(*a),
            ReplayRecord::Acf(a) => self.inputs.push_acf(*a),
            ReplayRecord::Holes { t_ms, reports } => {
                let stamped = LinkMessage::Holes {
                    t_ms: *t_ms,
                    reports: reports.clone(),
                }
                .stamped_reports();
                self.inputs.push_holes(*t_ms, &stamped, &self.cfg);
            }
        }
    }

    /// Hole reports already stamped by the receiver.
    pub fn ingest_hole_reports(&mut self, now: TimeMs, reports: &[HoleReport]) {
        self.inputs.push_holes(now, reports, &self.cfg);
    }

    /// Runs one fusion tick. Ticks at or before the previous one, and ticks
    /// after the session ended, do nothing. While paused the inputs are still
    /// fused, so staleness stays truthful, but the verifier does not step.
    /// Returns the number of new events.
    pub fn tick(&mut self, now: TimeMs) -> Result<usize, SessionError> {
        let t = snap_to_grid(now, self.cfg.tick_ms);
        if self.last_tick.is_some_and(|p| t <= p) || self.is_finished() {
            return Ok(0);
        }
        self.last_tick = Some(t);
        let obs = fuse_tick(&mut self.inputs, t, &self.cfg);
        self.stale = obs.stale;
        if self.paused_since.is_some() {
            return Ok(0);
        }
        let (next, events) = step(&self.state, &obs, &self.plan, &self.cfg)?;
        self.state = next;
        Ok(self.record(t, events))
    }

    /// Applies an operator command at `now` and returns the resulting state.
    pub fn control(&mut self, cmd: ControlCommand, now: TimeMs) -> Result<StateSnapshot, ControlError> {
        if self.is_finished() {
            return Err(ControlError::Ended);
        }
        match cmd {
            ControlCommand::Pause => {
                if self.paused_since.is_none() {
                    self.paused_since = Some(now);
                }
            }
            ControlCommand::Resume => {
                if let Some(since) = self.paused_since.take() {
                    self.shift_clock(now.saturating_sub(since));
                }
            }
            ControlCommand::AbortSession => {
                let end = self.last_tick.unwrap_or(now).max(now);
                self.report.abort(end);
            }
            ControlCommand::AcknowledgeGuidance { event_id } => {
                let is_guidance = event_id >= 1
                    && self
                        .log
                        .get(event_id as usize - 1)
                        .is_some_and(|e| matches!(e.event, VerifierEvent::Guidance { .. }));
                if !is_guidance {
                    return Err(ControlError::NotGuidance(event_id));
                }
                self.report.acknowledgments.push(Acknowledgment { event_id, t_ms: now });
            }
        }
        Ok(self.snapshot())
    }

    /// Freezes the verifier clock across a pause: every timer inside the
    /// state moves forward by the paused span.
    fn shift_clock(&mut self, by: TimeMs) {
        let s = &mut self.state;
        s.stage_entered_ms += by;
        s.started_ms += by;
        s.last_activity_ms += by;
        if let Some(g) = &mut s.last_guidance_ms {
            *g += by;
        }
        if let Some(seen) = &mut s.tightening.last_seen_ms {
            *seen += by;
        }
    }

    /// Ends an unfinished session as aborted at `now`.
    pub fn abort(&mut self, now: TimeMs) {
        if !self.is_finished() {
            self.report.abort(now);
        }
    }

    pub fn snapshot(&self) -> StateSnapshot {
        StateSnapshot {
            stage_ordinal: self.state.stage_ordinal,
            stage_id: self
                .plan
                .stage(self.state.stage_ordinal)
                .map(|s| s.id.clone())
                .unwrap_or_default(),
            phase: self.state.phase,
            holes: self.inputs.holes().summary().clone(),
            last_guidance: self
                .log
                .iter()
                .rev()
                .find(|e| matches!(e.event, VerifierEvent::Guidance { .. }))
                .cloned(),
            paused: self.is_paused(),
            outcome: self.report.outcome,
            last_tick_ms: self.last_tick,
            stale: self.stale,
        }
    }
}

/// Everything a replay run produces.
#[derive(Debug, Clone)]
pub struct ReplayRun {
    pub report: OperationReport,
    pub events: Vec<LoggedEvent>,
}

/// Session id of a replay: a prefix of the SHA-256 of its bytes.
pub fn replay_session_id(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
    format!("replay-{hex}")
}

/// Runs a replay with the bundled gesture classifier.
pub fn run_replay(bytes: &[u8], plan: &AssemblyPlan, cfg: &ThresholdConfig) -> Result<ReplayRun, SessionError> {
    run_replay_with(bytes, plan, cfg, Box::new(reference_classifier()))
}

/// Replays `bytes` against `plan`. The fusion clock uses the tick period of
/// the replay's meta record and starts on the first grid point at or after
/// the first record. It stops when the assembly completes or once the clock
/// has passed the last record; an unfinished run is reported as aborted.
pub fn run_replay_with(
    bytes: &[u8],
    plan: &AssemblyPlan,
    cfg: &ThresholdConfig,
    classifier: Box<dyn WindowClassifier + Send + Sync>,
) -> Result<ReplayRun, SessionError> {
    run_replay_observed(bytes, plan, cfg, classifier, |_, _| {})
}

/// [`run_replay_with`], calling `observe` with the verifier state after
/// every tick.
pub fn run_replay_observed(
    bytes: &[u8],
    plan: &AssemblyPlan,
    cfg: &ThresholdConfig,
    classifier: Box<dyn WindowClassifier + Send + Sync>,
    mut observe: impl FnMut(TimeMs, &VerifierState),
) -> Result<ReplayRun, SessionError> {
    let mut reader = ReplayReader::new(bytes).map(|r| r.map(|(_, rec)| rec));
    let Some(first) = reader.next().transpose()? else {
        unreachable!("the reader reports a missing meta record as an error");
    };
    let ReplayRecord::Meta { plan_id, tick_ms, .. } = first else {
        unreachable!("the reader only yields a meta record first");
    };
    if plan_id != plan.plan_id {
        return Err(SessionError::PlanMismatch {
            replay: plan_id,
            plan: plan.plan_id.clone(),
        });
    }
    let cfg = ThresholdConfig {
        tick_ms,
        ..cfg.clone()
    };
    let mut pending = reader.next().transpose()?;
    let first_t = pending.as_ref().and_then(|r| r.t_ms()).unwrap_or(0);
    let mut tick = first_t.div_ceil(tick_ms) * tick_ms;
    let mut engine = Engine::new(plan.clone(), cfg, classifier, replay_session_id(bytes), tick)?;
    let mut last_t = first_t;
    loop {
        while let Some(rec) = pending.take_if(|r| r.t_ms().unwrap_or(0) <= tick) {
            last_t = rec.t_ms().unwrap_or(last_t);
            engine.ingest(&rec);
            pending = reader.next().transpose()?;
        }
        engine.tick(tick)?;
        observe(tick, engine.state());
        if engine.is_finished() || (pending.is_none() && tick >= last_t) {
            break;
        }
        tick += tick_ms;
    }
    engine.abort(tick);
    Ok(ReplayRun {
        report: engine.report.clone(),
        events: engine.log,
    })
}
