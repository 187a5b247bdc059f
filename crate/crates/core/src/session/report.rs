use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::fsm::{guidance_text, ErrorKind, VerifierEvent};
use crate::plan::{AssemblyPlan, StageKind};
use crate::model::TimeMs;

use super::LoggedEvent;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Complete,
    Aborted,
    /// Only seen in reports requested while a live session is running.
    InProgress,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub kind: ErrorKind,
    pub t_ms: TimeMs,
    pub guidance_key: String,
    pub event_id: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub ordinal: u32,
    pub id: String,
    pub kind: StageKind,
    /// `None` until the stage completes.
    pub duration_ms: Option<TimeMs>,
    /// 0 for stages never entered; otherwise 1 plus the errors that sent the
    /// operator back to redo the step.
    pub attempts: u32,
    pub errors: Vec<ErrorRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub stages_completed: u32,
    pub error_count: u32,
    pub total_ms: TimeMs,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Acknowledgment {
    pub event_id: u64,
    pub t_ms: TimeMs,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationReport {
    pub session_id: String,
    pub plan_id: String,
    pub started_ms: TimeMs,
    pub ended_ms: TimeMs,
    pub stages: Vec<StageRecord>,
    pub totals: Totals,
    pub outcome: Outcome,
    pub acknowledgments: Vec<Acknowledgment>,
}

fn redo_error(kind: ErrorKind) -> bool {
    matches!(
        kind,
        ErrorKind::WrongPart | ErrorKind::WrongPlacement | ErrorKind::WrongAngle | ErrorKind::ScrewNotTightened
    )
}

impl OperationReport {
    /// An empty report for `plan`, before any event.
    pub fn new(session_id: String, plan: &AssemblyPlan, started_ms: TimeMs) -> Self {
        OperationReport {
            session_id,
            plan_id: plan.plan_id.clone(),
            started_ms,
            ended_ms: started_ms,
            stages: plan
                .stages
                .iter()
                .map(|s| StageRecord {
                    ordinal: s.ordinal,
                    id: s.id.clone(),
                    kind: s.kind,
                    duration_ms: None,
                    attempts: 0,
                    errors: Vec::new(),
                })
                .collect(),
            totals: Totals {
                stages_completed: 0,
                error_count: 0,
                total_ms: 0,
            },
            outcome: Outcome::InProgress,
            acknowledgments: Vec::new(),
        }
    }

    fn stage_mut(&mut self, ordinal: u32) -> Option<&mut StageRecord> {
        self.stages.iter_mut().find(|s| s.ordinal == ordinal)
    }

    pub fn observe(&mut self, logged: &LoggedEvent, plan: &AssemblyPlan) {
        self.ended_ms = self.ended_ms.max(logged.t_ms);
        match &logged.event {
            VerifierEvent::StageEntered { ordinal } => {
                if let Some(s) = self.stage_mut(*ordinal) {
                    s.attempts = s.attempts.max(1);
                }
            }
            VerifierEvent::StageCompleted { ordinal, duration_ms } => {
                if let Some(s) = self.stage_mut(*ordinal) {
                    s.duration_ms = Some(*duration_ms);
                }
                self.totals.stages_completed += 1;
            }
            VerifierEvent::ErrorDetected { stage, detail } => {
                let guidance_key = plan
                    .stage(*stage)
                    .map(|st| match guidance_text(detail, st, plan) {
                        VerifierEvent::Guidance { text_key, .. } => text_key,
                        _ => String::new(),
                    })
                    .unwrap_or_default();
                let kind = detail.kind();
                if let Some(s) = self.stage_mut(*stage) {
                    if redo_error(kind) {
                        s.attempts += 1;
                    }
                    s.errors.push(ErrorRecord {
                        kind,
                        t_ms: logged.t_ms,
                        guidance_key,
                        event_id: logged.event_id,
                    });
                }
                self.totals.error_count += 1;
            }
            VerifierEvent::AssemblyComplete { total_ms } => {
                self.totals.total_ms = *total_ms;
                self.outcome = Outcome::Complete;
            }
            VerifierEvent::Guidance { .. } => {}
        }
        if self.outcome != Outcome::Complete {
            self.totals.total_ms = self.ended_ms - self.started_ms;
        }
    }

    /// Closes an unfinished session at `t_ms`.
    pub fn abort(&mut self, t_ms: TimeMs) {
        if self.outcome == Outcome::Complete {
            return;
        }
        self.ended_ms = self.ended_ms.max(t_ms);
        self.totals.total_ms = self.ended_ms - self.started_ms;
        self.outcome = Outcome::Aborted;
    }

    pub fn to_json_pretty(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Deterministic Markdown rendering with one table row per stage.
    pub fn to_markdown(&self) -> String {
        let secs = |ms: TimeMs| format!("{}.{:03}", ms / 1000, ms % 1000);
        let mut out = String::new();
        let _ = writeln!(out, "# Operation report `{}`\n", self.session_id);
        let _ = writeln!(out, "- Plan: `{}`", self.plan_id);
        let _ = writeln!(out, "- Outcome: {:?}", self.outcome);
        let _ = writeln!(out, "- Started: {} ms, ended: {} ms", self.started_ms, self.ended_ms);
        let _ = writeln!(
            out,
            "- Stages completed: {}/{}, errors: {}, total: {} s\n",
            self.totals.stages_completed,
            self.stages.len(),
            self.totals.error_count,
            secs(self.totals.total_ms)
        );
        out.push_str("| # | Stage | Kind | Duration (s) | Attempts | Errors |\n");
        out.push_str("|---|-------|------|--------------|----------|--------|\n");
        for s in &self.stages {
            let errors = if s.errors.is_empty() {
                "-".to_string()
            } else {
                s.errors.iter().map(|e| format!("{:?}", e.kind)).collect::<Vec<_>>().join(", ")
            };
            let _ = writeln!(
                out,
                "| {} | {} | {:?} | {} | {} | {} |",
                s.ordinal,
                s.id,
                s.kind,
                s.duration_ms.map_or("-".to_string(), secs),
                s.attempts,
                errors
            );
        }
        let all: Vec<_> = self.stages.iter().flat_map(|s| s.errors.iter().map(move |e| (s.ordinal, e))).collect();
        if !all.is_empty() {
            out.push_str("\n## Errors\n\n");
            for (ordinal, e) in all {
                let _ = writeln!(out, "- t={} ms, stage {}: {:?} (guidance `{}`)", e.t_ms, ordinal, e.kind, e.guidance_key);
            }
        }
        if !self.acknowledgments.is_empty() {
            out.push_str("\n## Acknowledged guidance\n\n");
            for a in &self.acknowledgments {
                let _ = writeln!(out, "- event {} at t={} ms", a.event_id, a.t_ms);
            }
        }
        out
    }
}
