//! Recorded observation streams (`.replay.jsonl`).
//!
//! One JSON object per line, `"type"` first and every other key in
//! alphabetical order. The first record is `meta`; `t` never decreases.
//! The `holes` record has exactly the shape of the link's `holes` message,
//! so captured wire traffic can be spliced into a replay unchanged.

use std::io::BufRead;

use serde_json::{Map, Value};
use thiserror::Error;

use crate::gesture::HandFrame;
use crate::link::{write_tagged, LinkMessage, WireReport};
use crate::model::{ActionConfidence, Detection, DetectionFrame, ObjAngle, TimeMs};

pub const REPLAY_SCHEMA: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ReplayRecord {
    Meta { plan_id: String, schema: u64, tick_ms: u64 },
    Det(DetectionFrame),
    Hand { hand_index: u32, frame: HandFrame },
    Angle(ObjAngle),
    Holes { t_ms: TimeMs, reports: Vec<WireReport> },
    /// Precomputed action confidences, bypassing the gesture classifier.
    Acf(ActionConfidence),
}

impl ReplayRecord {
    pub fn type_tag(&self) -> &'static str {
        match self {
            ReplayRecord::Meta { .. } => "meta",
            ReplayRecord::Det(_) => "det",
            ReplayRecord::Hand { .. } => "hand",
            ReplayRecord::Angle(_) => "angle",
            ReplayRecord::Holes { .. } => "holes",
            ReplayRecord::Acf(_) => "acf",
        }
    }

    /// Record time; `meta` has none.
    pub fn t_ms(&self) -> Option<TimeMs> {
        match self {
            ReplayRecord::Meta { .. } => None,
            ReplayRecord::Det(f) => Some(f.t_ms),
            ReplayRecord::Hand { frame, .. } => Some(frame.t_ms),
            ReplayRecord::Angle(a) => Some(a.t_ms),
            ReplayRecord::Holes { t_ms, .. } => Some(*t_ms),
            ReplayRecord::Acf(a) => Some(a.t_ms),
        }
    }

    /// Moves the record to time `t`. No effect on `meta`.
    pub fn set_t_ms(&mut self, t: TimeMs) {
        match self {
            ReplayRecord::Meta { .. } => {}
            ReplayRecord::Det(f) => f.t_ms = t,
            ReplayRecord::Hand { frame, .. } => frame.t_ms = t,
            ReplayRecord::Angle(a) => a.t_ms = t,
            ReplayRecord::Holes { t_ms, .. } => *t_ms = t,
            ReplayRecord::Acf(a) => a.t_ms = t,
        }
    }

    /// Checks every value range of the record on its own.
    pub fn validate(&self) -> Result<(), String> {
        match self {
            ReplayRecord::Meta { schema, tick_ms, plan_id } => {
                if *schema != REPLAY_SCHEMA {
                    return Err(format!("schema {schema} is not {REPLAY_SCHEMA}"));
                }
                if *tick_ms == 0 {
                    return Err("tick_ms must be positive".into());
                }
                if plan_id.is_empty() {
                    return Err("plan_id is empty".into());
                }
                Ok(())
            }
            ReplayRecord::Det(f) => f.detections.iter().try_for_each(|d| d.validate().map_err(|e| e.to_string())),
            ReplayRecord::Hand { frame, .. } => {
                if frame.points.is_empty() {
                    return Err("hand has no points".into());
                }
                if frame.points.iter().flatten().any(|v| !v.is_finite()) {
                    return Err("hand point is not finite".into());
                }
                Ok(())
            }
            ReplayRecord::Angle(a) => a.validate().map_err(|e| e.to_string()),
            ReplayRecord::Holes { t_ms, reports } => LinkMessage::Holes {
                t_ms: *t_ms,
                reports: reports.clone(),
            }
            .validate()
            .map_err(|e| e.detail),
            ReplayRecord::Acf(a) => a.validate().map_err(|e| e.to_string()),
        }
    }

    fn fields(&self) -> Map<String, Value> {
        let mut m = Map::new();
        match self {
            ReplayRecord::Meta { plan_id, schema, tick_ms } => {
                m.insert("plan_id".into(), Value::from(plan_id.as_str()));
                m.insert("schema".into(), Value::from(*schema));
                m.insert("tick_ms".into(), Value::from(*tick_ms));
            }
            ReplayRecord::Det(f) => {
                m.insert("detections".into(), serde_json::to_value(&f.detections).expect("detections serialize"));
                m.insert("t".into(), Value::from(f.t_ms));
            }
            ReplayRecord::Hand { hand_index, frame } => {
                m.insert("hand_index".into(), Value::from(*hand_index));
                m.insert("points".into(), serde_json::to_value(&frame.points).expect("points serialize"));
                m.insert("t".into(), Value::from(frame.t_ms));
            }
            ReplayRecord::Angle(a) => {
                m.insert("conf".into(), Value::from(a.conf));
                m.insert("degrees".into(), Value::from(a.degrees));
                m.insert("t".into(), Value::from(a.t_ms));
            }
            ReplayRecord::Holes { t_ms, reports } => {
                m = LinkMessage::Holes {
                    t_ms: *t_ms,
                    reports: reports.clone(),
                }
                .fields();
            }
            ReplayRecord::Acf(a) => {
                m.insert("catch_big".into(), Value::from(a.catch_big));
                m.insert("catch_small".into(), Value::from(a.catch_small));
                m.insert("done".into(), Value::from(a.done));
                m.insert("t".into(), Value::from(a.t_ms));
                m.insert("tightening".into(), Value::from(a.tightening));
            }
        }
        m
    }

    /// Canonical line without the trailing newline.
    pub fn to_line(&self) -> String {
        write_tagged(self.type_tag(), &self.fields())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayErrorReason {
    NotJson,
    UnknownType,
    MissingMeta,
    TimestampRegression,
    FieldRange,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {reason:?}: {detail}")]
pub struct ReplayFormatError {
    /// 1-based.
    pub line: usize,
    pub reason: ReplayErrorReason,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplayWriteError {
    #[error("record {index}: {reason}")]
    InvariantViolation { index: usize, reason: String },
}

fn range(detail: impl Into<String>) -> (ReplayErrorReason, String) {
    (ReplayErrorReason::FieldRange, detail.into())
}

fn take<T: serde::de::DeserializeOwned>(obj: &mut Map<String, Value>, key: &str) -> Result<T, (ReplayErrorReason, String)> {
    let v = obj.remove(key).ok_or_else(|| range(format!("missing field {key}")))?;
    serde_json::from_value(v).map_err(|e| range(format!("{key}: {e}")))
}

/// Parses one line into a record, without the sequence rules.
pub fn parse_record(line: &str) -> Result<ReplayRecord, (ReplayErrorReason, String)> {
    let value: Value = serde_json::from_str(line).map_err(|e| (ReplayErrorReason::NotJson, e.to_string()))?;
    let Value::Object(mut obj) = value else {
        return Err((ReplayErrorReason::NotJson, "not a JSON object".into()));
    };
    let tag = match obj.remove("type") {
        Some(Value::String(s)) => s,
        _ => return Err((ReplayErrorReason::UnknownType, "missing or non-string type".into())),
    };
    let rec = match tag.as_str() {
        "meta" => ReplayRecord::Meta {
            plan_id: take(&mut obj, "plan_id")?,
            schema: take(&mut obj, "schema")?,
            tick_ms: take(&mut obj, "tick_ms")?,
        },
        "det" => {
            let detections: Vec<Detection> = take(&mut obj, "detections")?;
            ReplayRecord::Det(DetectionFrame {
                t_ms: take(&mut obj, "t")?,
                detections,
            })
        }
        "hand" => ReplayRecord::Hand {
            hand_index: take(&mut obj, "hand_index")?,
            frame: HandFrame {
                points: take(&mut obj, "points")?,
                t_ms: take(&mut obj, "t")?,
            },
        },
        "angle" => ReplayRecord::Angle(ObjAngle {
            conf: take(&mut obj, "conf")?,
            degrees: take(&mut obj, "degrees")?,
            t_ms: take(&mut obj, "t")?,
        }),
        "holes" => match LinkMessage::from_fields("holes", &obj) {
            Ok(LinkMessage::Holes { t_ms, reports }) => ReplayRecord::Holes { t_ms, reports },
            Ok(_) => unreachable!("holes tag parses to holes"),
            Err(e) => return Err(range(e.detail)),
        },
        "acf" => ReplayRecord::Acf(ActionConfidence {
            catch_big: take(&mut obj, "catch_big")?,
            catch_small: take(&mut obj, "catch_small")?,
            done: take(&mut obj, "done")?,
            t_ms: take(&mut obj, "t")?,
            tightening: take(&mut obj, "tightening")?,
        }),
        other => return Err((ReplayErrorReason::UnknownType, format!("unknown record type {other:?}"))),
    };
    rec.validate().map_err(range)?;
    Ok(rec)
}

/// Streaming reader. Yields `(line number, record)` and stops after the first
/// error.
pub struct ReplayReader<R> {
    input: R,
    line_no: usize,
    seen_meta: bool,
    last_t: Option<TimeMs>,
    done: bool,
    buf: String,
}

impl<R: BufRead> ReplayReader<R> {
    pub fn new(input: R) -> Self {
        ReplayReader {
            input,
            line_no: 0,
            seen_meta: false,
            last_t: None,
            done: false,
            buf: String::new(),
        }
    }

    fn fail(&mut self, reason: ReplayErrorReason, detail: String) -> Option<Result<(usize, ReplayRecord), ReplayFormatError>> {
        self.done = true;
        Some(Err(ReplayFormatError {
            line: self.line_no.max(1),
            reason,
            detail,
        }))
    }
}

impl<R: BufRead> Iterator for ReplayReader<R> {
    type Item = Result<(usize, ReplayRecord), ReplayFormatError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        self.buf.clear();
        let n = match self.input.read_line(&mut self.buf) {
            Ok(n) => n,
            Err(e) => {
                self.line_no += 1;
                return self.fail(ReplayErrorReason::NotJson, e.to_string());
            }
        };
        if n == 0 {
            self.done = true;
            if !self.seen_meta {
                self.line_no += 1;
                return self.fail(ReplayErrorReason::MissingMeta, "no meta record".into());
            }
            return None;
        }
        self.line_no += 1;
        let line = self.buf.trim_end_matches(['\n', '\r']).to_string();
        let rec = match parse_record(&line) {
            Ok(r) => r,
            Err((reason, detail)) => {
                if !self.seen_meta && reason != ReplayErrorReason::NotJson {
                    return self.fail(ReplayErrorReason::MissingMeta, format!("first record is invalid: {detail}"));
                }
                return self.fail(reason, detail);
            }
        };
        match (&rec, self.seen_meta) {
            (ReplayRecord::Meta { .. }, false) => self.seen_meta = true,
            (ReplayRecord::Meta { .. }, true) => return self.fail(ReplayErrorReason::FieldRange, "second meta record".into()),
            (_, false) => return self.fail(ReplayErrorReason::MissingMeta, format!("{} record before meta", rec.type_tag())),
            (_, true) => {}
        }
        if let Some(t) = rec.t_ms() {
            if let Some(prev) = self.last_t {
                if t < prev {
                    return self.fail(ReplayErrorReason::TimestampRegression, format!("t {t} after {prev}"));
                }
            }
            self.last_t = Some(t);
        }
        Some(Ok((self.line_no, rec)))
    }
}

pub fn read_replay(bytes: &[u8]) -> Result<Vec<ReplayRecord>, ReplayFormatError> {
    ReplayReader::new(bytes).map(|r| r.map(|(_, rec)| rec)).collect()
}

/// Checks the sequence rules a replay must satisfy.
pub fn check_sequence(records: &[ReplayRecord]) -> Result<(), ReplayWriteError> {
    let bad = |index, reason: String| Err(ReplayWriteError::InvariantViolation { index, reason });
    if !matches!(records.first(), Some(ReplayRecord::Meta { .. })) {
        return bad(0, "first record must be meta".into());
    }
    let mut last_t = None;
    for (i, r) in records.iter().enumerate() {
        if let Err(e) = r.validate() {
            return bad(i, e);
        }
        if i > 0 && matches!(r, ReplayRecord::Meta { .. }) {
            return bad(i, "second meta record".into());
        }
        if let Some(t) = r.t_ms() {
            if last_t.is_some_and(|p| t < p) {
                return bad(i, format!("timestamp {t} regresses"));
            }
            last_t = Some(t);
        }
    }
    Ok(())
}

/// Canonical JSONL. Validates everything before producing any output.
pub fn write_replay(records: &[ReplayRecord]) -> Result<Vec<u8>, ReplayWriteError> {
    check_sequence(records)?;
    let mut out = Vec::with_capacity(records.len() * 128);
    for r in records {
        out.extend_from_slice(r.to_line().as_bytes());
        out.push(b'\n');
    }
    Ok(out)
}
