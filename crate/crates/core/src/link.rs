//! Screw-hole observation link between a close-range camera node and the
//! control unit.
//!
//! Wire format: one minified JSON object per line, `"type"` first and the
//! remaining keys in alphabetical order.
//!
//! ```text
//! {"type":"hello","proto":1,"role":"camera","session":"bench-1"}
//! {"type":"ack","session":"bench-1","tick_ms":33}
//! {"type":"holes","reports":[{"conf":0.9,"hole":"E1","state":"assembled"}],"t":1200}
//! {"type":"hb","t":2000}
//! {"type":"bye","reason":"shutdown"}
//! ```

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::model::{ThresholdConfig, TimeMs};

pub const PROTO_VERSION: u64 = 1;
pub const MAX_LINE_BYTES: usize = 64 * 1024;
pub const HEARTBEAT_INTERVAL_MS: TimeMs = 1000;
pub const HEARTBEAT_TIMEOUT_MS: TimeMs = 3000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoleState {
    Empty,
    InProcess,
    Assembled,
    /// Staleness marker produced by aggregation; never valid on the wire.
    Unknown,
}

impl HoleState {
    pub fn as_str(self) -> &'static str {
        match self {
            HoleState::Empty => "empty",
            HoleState::InProcess => "in_process",
            HoleState::Assembled => "assembled",
            HoleState::Unknown => "unknown",
        }
    }

    fn from_wire(s: &str) -> Option<HoleState> {
        match s {
            "empty" => Some(HoleState::Empty),
            "in_process" => Some(HoleState::InProcess),
            "assembled" => Some(HoleState::Assembled),
            _ => None,
        }
    }
}

impl fmt::Display for HoleState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A single hole observation as carried inside a `holes` message.
#[derive(Debug, Clone, PartialEq)]
pub struct WireReport {
    pub hole: String,
    pub state: HoleState,
    pub conf: f64,
}

/// A hole observation stamped with its time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoleReport {
    pub hole_id: String,
    pub state: HoleState,
    pub conf: f64,
    pub t_ms: TimeMs,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinkMessage {
    Hello { role: String, session: String, proto: u64 },
    Ack { session: String, tick_ms: u64 },
    Holes { t_ms: TimeMs, reports: Vec<WireReport> },
    Heartbeat { t_ms: TimeMs },
    Bye { reason: String },
}

impl LinkMessage {
    pub fn type_tag(&self) -> &'static str {
        match self {
            LinkMessage::Hello { .. } => "hello",
            LinkMessage::Ack { .. } => "ack",
            LinkMessage::Holes { .. } => "holes",
            LinkMessage::Heartbeat { .. } => "hb",
            LinkMessage::Bye { .. } => "bye",
        }
    }

    /// Stamps each report of a `holes` message with the message time.
    pub fn stamped_reports(&self) -> Vec<HoleReport> {
        match self {
            LinkMessage::Holes { t_ms, reports } => reports
                .iter()
                .map(|r| HoleReport {
                    hole_id: r.hole.clone(),
                    state: r.state,
                    conf: r.conf,
                    t_ms: *t_ms,
                })
                .collect(),
            _ => Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        match self {
            LinkMessage::Hello { proto, .. } if *proto != PROTO_VERSION => {
                Err(ProtocolError::range(format!("proto {proto} is not {PROTO_VERSION}")))
            }
            LinkMessage::Holes { reports, .. } => reports.iter().try_for_each(|r| {
                if r.hole.is_empty() {
                    Err(ProtocolError::range("empty hole id"))
                } else if !(r.conf.is_finite() && (0.0..=1.0).contains(&r.conf)) {
                    Err(ProtocolError::range(format!("conf {} outside [0,1]", r.conf)))
                } else if r.state == HoleState::Unknown {
                    Err(ProtocolError::range("state unknown is not a wire state"))
                } else {
                    Ok(())
                }
            }),
            _ => Ok(()),
        }
    }

    /// Body fields without the type tag.
    pub fn fields(&self) -> Map<String, Value> {
        let mut m = Map::new();
        match self {
            LinkMessage::Hello { role, session, proto } => {
                m.insert("proto".into(), Value::from(*proto));
                m.insert("role".into(), Value::from(role.as_str()));
                m.insert("session".into(), Value::from(session.as_str()));
            }
            LinkMessage::Ack { session, tick_ms } => {
                m.insert("session".into(), Value::from(session.as_str()));
                m.insert("tick_ms".into(), Value::from(*tick_ms));
            }
            LinkMessage::Holes { t_ms, reports } => {
                let list = reports
                    .iter()
                    .map(|r| {
                        let mut o = Map::new();
                        o.insert("conf".into(), Value::from(r.conf));
                        o.insert("hole".into(), Value::from(r.hole.as_str()));
                        o.insert("state".into(), Value::from(r.state.as_str()));
                        Value::Object(o)
                    })
                    .collect();
                m.insert("reports".into(), Value::Array(list));
                m.insert("t".into(), Value::from(*t_ms));
            }
            LinkMessage::Heartbeat { t_ms } => {
                m.insert("t".into(), Value::from(*t_ms));
            }
            LinkMessage::Bye { reason } => {
                m.insert("reason".into(), Value::from(reason.as_str()));
            }
        }
        m
    }

    /// Parses body fields for `tag`. Shared with the replay record format.
    pub fn from_fields(tag: &str, obj: &Map<String, Value>) -> Result<LinkMessage, ProtocolError> {
        let msg = match tag {
            "hello" => LinkMessage::Hello {
                role: get_str(obj, "role")?,
                session: get_str(obj, "session")?,
                proto: get_u64(obj, "proto")?,
            },
            "ack" => LinkMessage::Ack {
                session: get_str(obj, "session")?,
                tick_ms: get_u64(obj, "tick_ms")?,
            },
            "holes" => {
                let t_ms = get_u64(obj, "t")?;
                let list = obj
                    .get("reports")
                    .ok_or_else(|| ProtocolError::malformed("missing field reports"))?
                    .as_array()
                    .ok_or_else(|| ProtocolError::malformed("reports is not an array"))?;
                let mut reports = Vec::with_capacity(list.len());
                for item in list {
                    let o = item
                        .as_object()
                        .ok_or_else(|| ProtocolError::malformed("report is not an object"))?;
                    let state_s = get_str(o, "state")?;
                    let state = HoleState::from_wire(&state_s)
                        .ok_or_else(|| ProtocolError::range(format!("state {state_s:?} is not a wire state")))?;
                    let conf = o
                        .get("conf")
                        .ok_or_else(|| ProtocolError::malformed("missing field conf"))?
                        .as_f64()
                        .ok_or_else(|| ProtocolError::malformed("conf is not a number"))?;
                    reports.push(WireReport {
                        hole: get_str(o, "hole")?,
                        state,
                        conf,
                    });
                }
                LinkMessage::Holes { t_ms, reports }
            }
            "hb" => LinkMessage::Heartbeat { t_ms: get_u64(obj, "t")? },
            "bye" => LinkMessage::Bye {
                reason: get_str(obj, "reason")?,
            },
            other => {
                return Err(ProtocolError {
                    kind: ProtocolErrorKind::UnknownType,
                    detail: format!("unknown message type {other:?}"),
                })
            }
        };
        msg.validate()?;
        Ok(msg)
    }
}

fn get_str(obj: &Map<String, Value>, key: &str) -> Result<String, ProtocolError> {
    obj.get(key)
        .ok_or_else(|| ProtocolError::malformed(format!("missing field {key}")))?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| ProtocolError::malformed(format!("{key} is not a string")))
}

fn get_u64(obj: &Map<String, Value>, key: &str) -> Result<u64, ProtocolError> {
    let v = obj
        .get(key)
        .ok_or_else(|| ProtocolError::malformed(format!("missing field {key}")))?;
    if !v.is_number() {
        return Err(ProtocolError::malformed(format!("{key} is not a number")));
    }
    v.as_u64()
        .ok_or_else(|| ProtocolError::range(format!("{key} = {v} is not a nonnegative integer")))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProtocolErrorKind {
    MalformedJson,
    UnknownType,
    FieldRange,
    BadSequence,
    LineTooLong,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{kind:?}: {detail}")]
pub struct ProtocolError {
    pub kind: ProtocolErrorKind,
    pub detail: String,
}

impl ProtocolError {
    fn malformed(detail: impl Into<String>) -> Self {
        ProtocolError {
            kind: ProtocolErrorKind::MalformedJson,
            detail: detail.into(),
        }
    }

    fn range(detail: impl Into<String>) -> Self {
        ProtocolError {
            kind: ProtocolErrorKind::FieldRange,
            detail: detail.into(),
        }
    }

    fn sequence(detail: impl Into<String>) -> Self {
        ProtocolError {
            kind: ProtocolErrorKind::BadSequence,
            detail: detail.into(),
        }
    }
}

/// Writes `{"type":<tag>, ...fields}` with the fields in map order.
pub fn write_tagged(tag: &str, fields: &Map<String, Value>) -> String {
    let mut out = String::with_capacity(64);
    out.push_str("{\"type\":");
    out.push_str(&Value::from(tag).to_string());
    for (k, v) in fields {
        out.push(',');
        out.push_str(&Value::from(k.as_str()).to_string());
        out.push(':');
        out.push_str(&v.to_string());
    }
    out.push('}');
    out
}

pub fn encode_message(msg: &LinkMessage) -> Vec<u8> {
    let mut line = write_tagged(msg.type_tag(), &msg.fields());
    line.push('\n');
    line.into_bytes()
}

/// Decodes one line. A single trailing `\n` (or `\r\n`) is accepted.
pub fn decode_message(line: &[u8]) -> Result<LinkMessage, ProtocolError> {
    let body = line.strip_suffix(b"\n").unwrap_or(line);
    let body = body.strip_suffix(b"\r").unwrap_or(body);
    if body.len() > MAX_LINE_BYTES {
        return Err(ProtocolError {
            kind: ProtocolErrorKind::LineTooLong,
            detail: format!("{} bytes exceeds {MAX_LINE_BYTES}", body.len()),
        });
    }
    let value: Value = serde_json::from_slice(body).map_err(|e| ProtocolError::malformed(e.to_string()))?;
    let Value::Object(mut obj) = value else {
        return Err(ProtocolError::malformed("not a JSON object"));
    };
    let tag = match obj.remove("type") {
        Some(Value::String(s)) => s,
        Some(_) => return Err(ProtocolError::malformed("type is not a string")),
        None => return Err(ProtocolError::malformed("missing field type")),
    };
    LinkMessage::from_fields(&tag, &obj)
}

/// Splits a byte stream into lines. Bytes without a terminating newline are
/// held until more data arrives.
#[derive(Debug, Default)]
pub struct LineFramer {
    buf: Vec<u8>,
    overflowed: bool,
}

impl LineFramer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends bytes and returns every line completed by them, each without
    /// its newline. A line longer than [`MAX_LINE_BYTES`] yields an error in
    /// its place.
    pub fn push(&mut self, bytes: &[u8]) -> Vec<Result<Vec<u8>, ProtocolError>> {
        let mut out = Vec::new();
        for &b in bytes {
            if b == b'\n' {
                if self.overflowed {
                    out.push(Err(ProtocolError {
                        kind: ProtocolErrorKind::LineTooLong,
                        detail: format!("line exceeds {MAX_LINE_BYTES} bytes"),
                    }));
                } else {
                    out.push(Ok(std::mem::take(&mut self.buf)));
                }
                self.buf.clear();
                self.overflowed = false;
            } else if self.buf.len() > MAX_LINE_BYTES {
                // keep dropping until the newline so memory stays bounded
                self.overflowed = true;
            } else {
                self.buf.push(b);
            }
        }
        out
    }

    pub fn pending(&self) -> usize {
        self.buf.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinkOutcome {
    Clean { reason: String },
    HeartbeatTimeout { silent_ms: TimeMs },
    Protocol(ProtocolError),
    /// Transport closed without a `bye`.
    Disconnected,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LinkAction {
    Send(LinkMessage),
    Deliver(Vec<HoleReport>),
    Close(LinkOutcome),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Phase {
    AwaitHello,
    Open,
    Closed,
}

/// Server side of one connection, free of I/O: feed it lines and clock
/// readings and carry out the actions it returns.
#[derive(Debug, Clone)]
pub struct LinkSession {
    phase: Phase,
    tick_ms: u64,
    last_heard_ms: TimeMs,
    session: Option<String>,
}

impl LinkSession {
    pub fn new(now: TimeMs, tick_ms: u64) -> Self {
        LinkSession {
            phase: Phase::AwaitHello,
            tick_ms,
            last_heard_ms: now,
            session: None,
        }
    }

    pub fn is_closed(&self) -> bool {
        self.phase == Phase::Closed
    }

    pub fn session(&self) -> Option<&str> {
        self.session.as_deref()
    }

    /// Time at which silence becomes a heartbeat timeout.
    pub fn deadline(&self) -> TimeMs {
        self.last_heard_ms + HEARTBEAT_TIMEOUT_MS
    }

    fn close(&mut self, outcome: LinkOutcome) -> Vec<LinkAction> {
        self.phase = Phase::Closed;
        vec![LinkAction::Close(outcome)]
    }

    pub fn on_line(&mut self, now: TimeMs, line: Result<&[u8], ProtocolError>) -> Vec<LinkAction> {
        if self.is_closed() {
            return Vec::new();
        }
        let msg = match line.and_then(decode_message) {
            Ok(m) => m,
            Err(e) => return self.close(LinkOutcome::Protocol(e)),
        };
        self.last_heard_ms = self.last_heard_ms.max(now);
        match (&self.phase, msg) {
            (Phase::AwaitHello, LinkMessage::Hello { session, .. }) => {
                self.phase = Phase::Open;
                self.session = Some(session.clone());
                vec![LinkAction::Send(LinkMessage::Ack {
                    session,
                    tick_ms: self.tick_ms,
                })]
            }
            (Phase::AwaitHello, other) => self.close(LinkOutcome::Protocol(ProtocolError::sequence(format!(
                "{} before hello",
                other.type_tag()
            )))),
            (Phase::Open, m @ LinkMessage::Holes { .. }) => vec![LinkAction::Deliver(m.stamped_reports())],
            (Phase::Open, LinkMessage::Heartbeat { .. }) => Vec::new(),
            (Phase::Open, LinkMessage::Bye { reason }) => self.close(LinkOutcome::Clean { reason }),
            (Phase::Open, other) => self.close(LinkOutcome::Protocol(ProtocolError::sequence(format!(
                "unexpected {} after handshake",
                other.type_tag()
            )))),
            (Phase::Closed, _) => Vec::new(),
        }
    }

    pub fn on_eof(&mut self) -> Vec<LinkAction> {
        if self.is_closed() {
            return Vec::new();
        }
        self.close(LinkOutcome::Disconnected)
    }

    pub fn on_clock(&mut self, now: TimeMs) -> Vec<LinkAction> {
        if self.is_closed() || now < self.deadline() {
            return Vec::new();
        }
        let silent_ms = now - self.last_heard_ms;
        self.close(LinkOutcome::HeartbeatTimeout { silent_ms })
    }
}

pub trait Clock {
    fn now_ms(&self) -> TimeMs;
}

pub enum Recv {
    Data(Vec<u8>),
    /// Nothing arrived before the deadline.
    Idle,
    Eof,
}

/// Blocking byte transport for [`run_link_session`].
pub trait LinkTransport {
    /// Waits for bytes until the clock reaches `deadline`.
    fn recv(&mut self, deadline: TimeMs) -> std::io::Result<Recv>;
    fn send(&mut self, bytes: &[u8]) -> std::io::Result<()>;
}

/// Runs one server-side connection to completion, handing validated reports
/// to `sink`.
pub fn run_link_session<T, C, S>(transport: &mut T, clock: &C, tick_ms: u64, mut sink: S) -> LinkOutcome
where
    T: LinkTransport,
    C: Clock,
    S: FnMut(Vec<HoleReport>),
{
    let mut session = LinkSession::new(clock.now_ms(), tick_ms);
    let mut framer = LineFramer::new();
    loop {
        let actions = match transport.recv(session.deadline()) {
            Ok(Recv::Data(bytes)) => {
                let now = clock.now_ms();
                let mut acts = Vec::new();
                for line in framer.push(&bytes) {
                    acts.extend(session.on_line(now, line.as_deref().map_err(Clone::clone)));
                }
                acts
            }
            Ok(Recv::Idle) => session.on_clock(clock.now_ms()),
            Ok(Recv::Eof) | Err(_) => session.on_eof(),
        };
        for a in actions {
            match a {
                LinkAction::Send(m) => {
                    if transport.send(&encode_message(&m)).is_err() {
                        return LinkOutcome::Disconnected;
                    }
                }
                LinkAction::Deliver(r) => sink(r),
                LinkAction::Close(outcome) => return outcome,
            }
        }
    }
}

/// Consolidated view of one hole.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoleSummary {
    pub state: HoleState,
    pub last_update_ms: Option<TimeMs>,
    /// Qualifying reports behind `state`.
    pub support_count: usize,
}

/// Per-hole report history and consolidated states.
#[derive(Debug, Clone, Default)]
pub struct HoleAggregate {
    history: BTreeMap<String, VecDeque<HoleReport>>,
    summary: BTreeMap<String, HoleSummary>,
}

impl HoleAggregate {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&self, hole: &str) -> HoleState {
        self.summary.get(hole).map_or(HoleState::Unknown, |s| s.state)
    }

    pub fn summary(&self) -> &BTreeMap<String, HoleSummary> {
        &self.summary
    }

    /// Adds `reports` and recomputes every hole's state at `now`.
    pub fn update(&mut self, now: TimeMs, reports: &[HoleReport], cfg: &ThresholdConfig) {
        for r in reports {
            if r.conf >= cfg.hole_min_conf && r.state != HoleState::Unknown {
                self.history.entry(r.hole_id.clone()).or_default().push_back(r.clone());
            } else {
                self.history.entry(r.hole_id.clone()).or_default();
            }
        }
        let oldest = now.saturating_sub(cfg.hole_ttl_ms);
        for (hole, hist) in &mut self.history {
            hist.retain(|r| r.t_ms >= oldest);
            let mut weight: BTreeMap<HoleState, (f64, usize)> = BTreeMap::new();
            for r in hist.iter().filter(|r| r.t_ms <= now) {
                let w = weight.entry(r.state).or_default();
                w.0 += r.conf;
                w.1 += 1;
            }
            // BTreeMap iterates Empty < InProcess < Assembled; strict > keeps
            // the lower state on ties.
            let mut best: Option<(HoleState, f64, usize)> = None;
            for (state, (w, n)) in &weight {
                if best.is_none_or(|b| *w > b.1) {
                    best = Some((*state, *w, *n));
                }
            }
            let last = hist.iter().filter(|r| r.t_ms <= now).map(|r| r.t_ms).max();
            let s = match best {
                Some((state, _, n)) => HoleSummary {
                    state,
                    last_update_ms: last,
                    support_count: n,
                },
                None => HoleSummary {
                    state: HoleState::Unknown,
                    last_update_ms: self.summary.get(hole).and_then(|s| s.last_update_ms),
                    support_count: 0,
                },
            };
            self.summary.insert(hole.clone(), s);
        }
    }
}

/// Functional form of [`HoleAggregate::update`].
pub fn aggregate_holes(mut agg: HoleAggregate, now: TimeMs, reports: &[HoleReport], cfg: &ThresholdConfig) -> HoleAggregate {
    agg.update(now, reports, cfg);
    agg
}
