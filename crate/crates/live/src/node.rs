//! Client side: a simulated screw-camera node and a stream feeder that play
//! a recorded session into a live server at the pace of a [`LiveClock`].

use std::io;
use std::net::SocketAddr;
use std::time::Duration;

use stageverify_core::link::{decode_message, encode_message, Clock, LineFramer, LinkMessage, WireReport, HEARTBEAT_INTERVAL_MS, PROTO_VERSION};
use stageverify_core::model::TimeMs;
use stageverify_core::replay::ReplayRecord;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;

use crate::clock::LiveClock;

/// Real time allowed for the server's `ack`.
const ACK_TIMEOUT: Duration = Duration::from_secs(5);

/// Hole messages of a recording, in order.
pub type HoleScript = Vec<(TimeMs, Vec<WireReport>)>;

/// Splits a recording into what the detector process streams (with its
/// `meta` record) and what the screw camera sends.
pub fn split_replay(records: &[ReplayRecord]) -> (Vec<ReplayRecord>, HoleScript) {
    let mut stream = Vec::new();
    let mut holes = Vec::new();
    for r in records {
        match r {
            ReplayRecord::Holes { t_ms, reports } => holes.push((*t_ms, reports.clone())),
            other => stream.push(other.clone()),
        }
    }
    (stream, holes)
}

/// Time of the earliest timed record, the zero point for pacing.
pub fn origin_of(records: &[ReplayRecord]) -> TimeMs {
    records.iter().filter_map(ReplayRecord::t_ms).min().unwrap_or(0)
}

async fn sleep_until_live(clock: &LiveClock, live_ms: TimeMs) {
    tokio::time::sleep_until(tokio::time::Instant::from_std(clock.instant_at(live_ms))).await;
}

/// Connects to the screw link, performs the handshake and plays `script`,
/// with `t - origin` mapped onto `clock`. Heartbeats fill gaps longer than
/// the heartbeat interval. Ends with `bye`.
pub async fn run_sim_node(addr: SocketAddr, script: &[(TimeMs, Vec<WireReport>)], origin: TimeMs, clock: LiveClock, session: &str) -> io::Result<()> {
    let mut stream = TcpStream::connect(addr).await?;
    stream.set_nodelay(true)?;
    let hello = LinkMessage::Hello {
        role: "screw-camera".into(),
        session: session.into(),
        proto: PROTO_VERSION,
    };
    stream.write_all(&encode_message(&hello)).await?;
    await_ack(&mut stream).await?;

    let mut last_sent = clock.now_ms();
    for (t, reports) in script {
        let due = t.saturating_sub(origin);
        while due > last_sent + HEARTBEAT_INTERVAL_MS {
            let beat = last_sent + HEARTBEAT_INTERVAL_MS;
            sleep_until_live(&clock, beat).await;
            let hb = LinkMessage::Heartbeat { t_ms: origin + beat };
            stream.write_all(&encode_message(&hb)).await?;
            last_sent = beat;
        }
        sleep_until_live(&clock, due).await;
        let msg = LinkMessage::Holes {
            t_ms: *t,
            reports: reports.clone(),
        };
        stream.write_all(&encode_message(&msg)).await?;
        last_sent = last_sent.max(due);
    }
    let bye = LinkMessage::Bye {
        reason: "script finished".into(),
    };
    stream.write_all(&encode_message(&bye)).await?;
    stream.shutdown().await
}

async fn await_ack(stream: &mut TcpStream) -> io::Result<()> {
    let mut framer = LineFramer::new();
    let mut buf = [0u8; 1024];
    let read = async {
        loop {
            let n = stream.read(&mut buf).await?;
            if n == 0 {
                return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "server closed before ack"));
            }
            if let Some(line) = framer.push(&buf[..n]).into_iter().next() {
                let msg = line
                    .and_then(|l| decode_message(&l))
                    .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
                return match msg {
                    LinkMessage::Ack { .. } => Ok(()),
                    other => Err(io::Error::new(io::ErrorKind::InvalidData, format!("expected ack, got {}", other.type_tag()))),
                };
            }
        }
    };
    tokio::time::timeout(ACK_TIMEOUT, read)
        .await
        .map_err(|_| io::Error::new(io::ErrorKind::TimedOut, "no ack from server"))?
}

/// Streams `records` to the local stream listener: the `meta` record at
/// once, then each timed record when `clock` reaches `t - origin`.
pub async fn run_feeder(addr: SocketAddr, records: &[ReplayRecord], origin: TimeMs, clock: LiveClock) -> io::Result<()> {
    let mut stream = TcpStream::connect(addr).await?;
    stream.set_nodelay(true)?;
    for r in records {
        if let Some(t) = r.t_ms() {
            sleep_until_live(&clock, t.saturating_sub(origin)).await;
        }
        let mut line = r.to_line().into_bytes();
        line.push(b'\n');
        stream.write_all(&line).await?;
    }
    stream.shutdown().await
}
