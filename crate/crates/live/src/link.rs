//! Async driver for the screw-camera link, one task per connection.

use stageverify_core::link::{encode_message, Clock, LineFramer, LinkAction, LinkOutcome, LinkSession};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpStream;
use tokio::sync::mpsc;

use crate::clock::LiveClock;
use crate::orchestrator::{Input, SourceId};

/// Serves one screw-camera connection until it closes, forwarding validated
/// hole reports to the orchestrator. The orchestrator is told when the
/// connection ends; a lost camera is not an error for the session, its holes
/// simply go stale.
pub async fn serve_screw_link(mut stream: TcpStream, source: SourceId, clock: LiveClock, tick_ms: u64, tx: mpsc::Sender<Input>) -> LinkOutcome {
    let mut session = LinkSession::new(clock.now_ms(), tick_ms);
    let mut framer = LineFramer::new();
    let mut buf = vec![0u8; 8192];
    let outcome = 'conn: loop {
        let deadline = tokio::time::Instant::from_std(clock.instant_at(session.deadline()));
        let actions = match tokio::time::timeout_at(deadline, stream.read(&mut buf)).await {
            Ok(Ok(0)) | Ok(Err(_)) => session.on_eof(),
            Ok(Ok(n)) => {
                let now = clock.now_ms();
                let mut acts = Vec::new();
                for line in framer.push(&buf[..n]) {
                    acts.extend(session.on_line(now, line.as_deref().map_err(Clone::clone)));
                }
                acts
            }
            Err(_) => session.on_clock(clock.now_ms()),
        };
        for action in actions {
            match action {
                LinkAction::Send(msg) => {
                    if stream.write_all(&encode_message(&msg)).await.is_err() {
                        break 'conn LinkOutcome::Disconnected;
                    }
                }
                LinkAction::Deliver(reports) => {
                    if tx.send(Input::Holes { source, reports }).await.is_err() {
                        break 'conn LinkOutcome::Clean {
                            reason: "session ended".into(),
                        };
                    }
                }
                LinkAction::Close(outcome) => break 'conn outcome,
            }
        }
    };
    let _ = tx.send(Input::Closed { source }).await;
    match &outcome {
        LinkOutcome::Clean { reason } => tracing::info!(source, reason, "screw camera disconnected"),
        other => tracing::warn!(source, outcome = ?other, "screw camera lost"),
    }
    outcome
}
