//! Local observation stream: the same JSONL records as a replay file, sent
//! over TCP by the detector process.

use stageverify_core::link::LineFramer;
use stageverify_core::replay::{parse_record, ReplayRecord};
use tokio::io::AsyncReadExt;
use tokio::net::TcpStream;
use tokio::sync::mpsc;

use crate::orchestrator::{Input, SourceId};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StreamEnd {
    Eof,
    /// The connection was dropped after `line` (1-based) was rejected.
    Rejected { line: usize, reason: String },
    SessionEnded,
}

/// Reads records until the peer closes or sends something invalid. The
/// first line must be a `meta` record naming `plan_id`; each later line is
/// one timed record. Records are forwarded in arrival order.
pub async fn serve_stream(mut stream: TcpStream, source: SourceId, plan_id: &str, tx: mpsc::Sender<Input>) -> StreamEnd {
    let mut framer = LineFramer::new();
    let mut buf = vec![0u8; 16 * 1024];
    let mut line_no = 0usize;
    let end = 'conn: loop {
        let n = match stream.read(&mut buf).await {
            Ok(0) | Err(_) => break StreamEnd::Eof,
            Ok(n) => n,
        };
        for line in framer.push(&buf[..n]) {
            line_no += 1;
            let rejected = |reason: String| StreamEnd::Rejected { line: line_no, reason };
            let line = match line {
                Ok(l) => l,
                Err(e) => break 'conn rejected(e.to_string()),
            };
            let Ok(text) = std::str::from_utf8(&line) else {
                break 'conn rejected("line is not UTF-8".into());
            };
            if text.trim().is_empty() {
                continue;
            }
            let record = match parse_record(text) {
                Ok(r) => r,
                Err((reason, detail)) => break 'conn rejected(format!("{reason:?}: {detail}")),
            };
            match (line_no, record) {
                (1, ReplayRecord::Meta { plan_id: ref p, .. }) if p != plan_id => {
                    break 'conn rejected(format!("stream is for plan {p:?}, not {plan_id:?}"));
                }
                (1, ReplayRecord::Meta { .. }) => {}
                (1, other) => break 'conn rejected(format!("expected meta first, got {}", other.type_tag())),
                (_, ReplayRecord::Meta { .. }) => break 'conn rejected("meta may only appear first".into()),
                (_, record) => {
                    if tx.send(Input::Record { source, record }).await.is_err() {
                        break 'conn StreamEnd::SessionEnded;
                    }
                }
            }
        }
    };
    let _ = tx.send(Input::Closed { source }).await;
    match &end {
        StreamEnd::Rejected { line, reason } => tracing::warn!(source, line, reason, "stream rejected"),
        _ => tracing::info!(source, "stream closed"),
    }
    end
}
