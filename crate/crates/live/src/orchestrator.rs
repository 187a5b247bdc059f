//! The single owner of a live session's mutable state.
//!
//! Listeners never touch the engine. They send timestamped [`Input`]s over a
//! queue; the orchestrator stamps them onto the fusion clock, runs the tick
//! loop and publishes read-only views through [`Shared`].

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use stageverify_core::gesture::WindowClassifier;
use stageverify_core::link::HoleReport;
use stageverify_core::model::{ThresholdConfig, TimeMs};
use stageverify_core::plan::AssemblyPlan;
use stageverify_core::replay::ReplayRecord;
use stageverify_core::session::{snap_to_grid, ControlCommand, Engine, LoggedEvent, OperationReport, SessionError, StateSnapshot};
use tokio::sync::{broadcast, oneshot};

/// Identifies one connection for timestamp rebasing.
pub type SourceId = u64;

/// Most grid points replayed by one call to [`Orchestrator::tick`] when the
/// tick loop fell behind.
const MAX_CATCH_UP_TICKS: u64 = 100;

const BROADCAST_CAPACITY: usize = 1024;

/// Reason a control command was refused, shown to HTTP clients.
pub const NOT_STARTED: &str = "session has not started";

pub enum Input {
    Record { source: SourceId, record: ReplayRecord },
    Holes { source: SourceId, reports: Vec<HoleReport> },
    Closed { source: SourceId },
    Control {
        cmd: ControlCommand,
        reply: oneshot::Sender<Result<StateSnapshot, String>>,
    },
}

impl std::fmt::Debug for Input {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Input::Record { source, record } => write!(f, "Record({source}, {})", record.type_tag()),
            Input::Holes { source, reports } => write!(f, "Holes({source}, {} reports)", reports.len()),
            Input::Closed { source } => write!(f, "Closed({source})"),
            Input::Control { cmd, .. } => write!(f, "Control({cmd:?})"),
        }
    }
}

struct Published {
    snapshot: StateSnapshot,
    report: OperationReport,
    events: Vec<LoggedEvent>,
}

/// Read-only session views for the HTTP surface.
pub struct Shared {
    published: RwLock<Published>,
    events_tx: broadcast::Sender<LoggedEvent>,
}

impl Shared {
    fn new(snapshot: StateSnapshot, report: OperationReport) -> Self {
        Shared {
            published: RwLock::new(Published {
                snapshot,
                report,
                events: Vec::new(),
            }),
            events_tx: broadcast::channel(BROADCAST_CAPACITY).0,
        }
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Published> {
        self.published.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn snapshot(&self) -> StateSnapshot {
        self.read().snapshot.clone()
    }

    pub fn report(&self) -> OperationReport {
        self.read().report.clone()
    }

    /// Published events with an id above `event_id`, oldest first.
    pub fn events_after(&self, event_id: u64) -> Vec<LoggedEvent> {
        let p = self.read();
        // ids are 1-based and dense
        let from = (event_id as usize).min(p.events.len());
        p.events[from..].to_vec()
    }

    pub fn event_count(&self) -> usize {
        self.read().events.len()
    }

    /// New events as they are published. Subscribe before reading the
    /// backlog so nothing falls between the two.
    pub fn subscribe(&self) -> broadcast::Receiver<LoggedEvent> {
        self.events_tx.subscribe()
    }

    fn publish(&self, snapshot: StateSnapshot, report: OperationReport, new_events: &[LoggedEvent]) {
        {
            let mut p = self.published.write().unwrap_or_else(|e| e.into_inner());
            p.snapshot = snapshot;
            p.report = report;
            p.events.extend_from_slice(new_events);
        }
        for e in new_events {
            // no subscribers is fine
            let _ = self.events_tx.send(e.clone());
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Rebase {
    offset: i64,
    last: TimeMs,
}

/// Drives one live session.
///
/// The engine starts at the first timed input, so a station waiting for its
/// cameras to connect does not collect null-action errors. Every source's
/// timestamps are shifted so its first input lands at the moment it arrived;
/// after that its own spacing is kept, clamped to never run ahead of the
/// clock or backwards.
pub struct Orchestrator {
    plan: AssemblyPlan,
    cfg: ThresholdConfig,
    session_id: String,
    classifier: Option<Box<dyn WindowClassifier + Send + Sync>>,
    engine: Option<Engine>,
    sources: HashMap<SourceId, Rebase>,
    last_tick: Option<TimeMs>,
    published: usize,
    finished: bool,
    shared: Arc<Shared>,
}

impl Orchestrator {
    pub fn new(
        plan: AssemblyPlan,
        cfg: ThresholdConfig,
        classifier: Box<dyn WindowClassifier + Send + Sync>,
        session_id: String,
    ) -> Result<Self, SessionError> {
        // a throwaway engine validates the inputs and gives the pre-start view
        let probe = Engine::with_reference_classifier(plan.clone(), cfg.clone(), session_id.clone(), 0)?;
        let shared = Arc::new(Shared::new(probe.snapshot(), OperationReport::new(session_id.clone(), &plan, 0)));
        Ok(Orchestrator {
            plan,
            cfg,
            session_id,
            classifier: Some(classifier),
            engine: None,
            sources: HashMap::new(),
            last_tick: None,
            published: 0,
            finished: false,
            shared,
        })
    }

    pub fn shared(&self) -> Arc<Shared> {
        Arc::clone(&self.shared)
    }

    pub fn config(&self) -> &ThresholdConfig {
        &self.cfg
    }

    pub fn is_started(&self) -> bool {
        self.engine.is_some()
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn engine(&self) -> Option<&Engine> {
        self.engine.as_ref()
    }

    pub fn report(&self) -> OperationReport {
        self.shared.report()
    }

    fn start(&mut self, now: TimeMs) -> &mut Engine {
        if self.engine.is_none() {
            let classifier = self.classifier.take().expect("classifier is only taken at start");
            let start = snap_to_grid(now, self.cfg.tick_ms);
            let engine = Engine::new(self.plan.clone(), self.cfg.clone(), classifier, self.session_id.clone(), start)
                .expect("plan and config were validated in new");
            tracing::info!(start_ms = start, "session started");
            self.engine = Some(engine);
        }
        self.engine.as_mut().expect("engine was just created")
    }

    fn stamp(&mut self, source: SourceId, t: TimeMs, now: TimeMs) -> TimeMs {
        let r = self.sources.entry(source).or_insert(Rebase {
            offset: now as i64 - t as i64,
            last: 0,
        });
        let shifted = (t as i64).saturating_add(r.offset).max(0) as TimeMs;
        let stamped = shifted.min(now).max(r.last);
        r.last = stamped;
        stamped
    }

    /// Applies one input at live time `now`. Returns the final report if the
    /// input ended the session.
    pub fn handle(&mut self, input: Input, now: TimeMs) -> Option<OperationReport> {
        match input {
            Input::Record { source, mut record } => {
                let t = record.t_ms()?;
                // bring the clock up to date first so inputs never land behind it
                if let Some(done) = self.tick(now) {
                    return Some(done);
                }
                if self.finished {
                    return None;
                }
                let stamped = self.stamp(source, t, now);
                record.set_t_ms(stamped);
                self.start(now).ingest(&record);
                None
            }
            Input::Holes { source, mut reports } => {
                if let Some(done) = self.tick(now) {
                    return Some(done);
                }
                if self.finished {
                    return None;
                }
                for r in &mut reports {
                    r.t_ms = self.stamp(source, r.t_ms, now);
                }
                self.start(now).ingest_hole_reports(now, &reports);
                None
            }
            Input::Closed { source } => {
                self.sources.remove(&source);
                None
            }
            Input::Control { cmd, reply } => {
                let result = self.control(cmd, now);
                let _ = reply.send(result);
                self.take_finished()
            }
        }
    }

    /// Applies an operator command. Aborting is allowed before any input
    /// arrived; the other commands need a running session.
    pub fn control(&mut self, cmd: ControlCommand, now: TimeMs) -> Result<StateSnapshot, String> {
        if self.engine.is_none() && !self.finished {
            if cmd != ControlCommand::AbortSession {
                return Err(NOT_STARTED.into());
            }
            self.start(now);
        }
        let Some(engine) = self.engine.as_mut() else {
            return Err(NOT_STARTED.into());
        };
        let result = engine.control(cmd, now).map_err(|e| e.to_string());
        self.publish();
        result
    }

    /// Advances the fusion clock to `now`, running every grid point since
    /// the previous tick (at most [`MAX_CATCH_UP_TICKS`] of them). Returns the
    /// final report once, right after the finishing events were published.
    pub fn tick(&mut self, now: TimeMs) -> Option<OperationReport> {
        let tick_ms = self.cfg.tick_ms;
        let engine = self.engine.as_mut()?;
        let target = snap_to_grid(now, tick_ms);
        let earliest = target.saturating_sub(MAX_CATCH_UP_TICKS * tick_ms);
        let mut t = match self.last_tick {
            Some(last) => (last + tick_ms).max(earliest),
            None => target,
        };
        while t <= target && !engine.is_finished() {
            if let Err(e) = engine.tick(t) {
                tracing::error!(error = %e, "verifier failed; aborting the session");
                engine.abort(t);
            }
            self.last_tick = Some(t);
            t += tick_ms;
        }
        self.publish();
        self.take_finished()
    }

    /// Ends the session as aborted unless it already finished.
    pub fn abort(&mut self, now: TimeMs) -> Option<OperationReport> {
        if self.finished {
            return None;
        }
        self.start(now).abort(now);
        self.publish();
        self.take_finished()
    }

    fn take_finished(&mut self) -> Option<OperationReport> {
        let engine = self.engine.as_ref()?;
        if self.finished || !engine.is_finished() {
            return None;
        }
        self.finished = true;
        tracing::info!(outcome = ?engine.report().outcome, "session finished");
        Some(engine.report().clone())
    }

    fn publish(&mut self) {
        let Some(engine) = self.engine.as_ref() else { return };
        let new = &engine.events()[self.published..];
        self.shared.publish(engine.snapshot(), engine.report().clone(), new);
        self.published = engine.events().len();
    }
}
