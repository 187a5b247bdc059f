//! HTTP surface: state, report, the event stream and operator control.

use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::State;
use axum::http::{HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use futures_util::stream::{self, Stream};
use serde_json::json;
use stageverify_core::session::{ControlCommand, LoggedEvent, OperationReport, StateSnapshot};
use tokio::sync::{broadcast, mpsc, oneshot, watch};

use crate::orchestrator::{Input, Shared};

#[derive(Clone)]
pub struct AppState {
    pub shared: Arc<Shared>,
    pub inputs: mpsc::Sender<Input>,
    /// Flips to true when the server stops; open event streams then end.
    pub stop: watch::Receiver<bool>,
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/state", get(get_state))
        .route("/report", get(get_report))
        .route("/events", get(get_events))
        .route("/control", post(post_control))
        .with_state(state)
}

async fn get_state(State(app): State<AppState>) -> Json<StateSnapshot> {
    Json(app.shared.snapshot())
}

async fn get_report(State(app): State<AppState>) -> Json<OperationReport> {
    Json(app.shared.report())
}

fn conflict(msg: impl Into<String>) -> Response {
    (StatusCode::CONFLICT, Json(json!({ "error": msg.into() }))).into_response()
}

async fn post_control(State(app): State<AppState>, Json(cmd): Json<ControlCommand>) -> Response {
    let (reply, answer) = oneshot::channel();
    if app.inputs.send(Input::Control { cmd, reply }).await.is_err() {
        return conflict("session has already ended");
    }
    match answer.await {
        Ok(Ok(snapshot)) => Json(snapshot).into_response(),
        Ok(Err(msg)) => conflict(msg),
        Err(_) => conflict("session has already ended"),
    }
}

struct EventCursor {
    shared: Arc<Shared>,
    rx: broadcast::Receiver<LoggedEvent>,
    stop: watch::Receiver<bool>,
    backlog: std::collections::VecDeque<LoggedEvent>,
    last_id: u64,
}

impl EventCursor {
    async fn next(&mut self) -> Option<LoggedEvent> {
        loop {
            if let Some(e) = self.backlog.pop_front() {
                if e.event_id > self.last_id {
                    self.last_id = e.event_id;
                    return Some(e);
                }
                continue;
            }
            let received = tokio::select! {
                r = self.rx.recv() => r,
                _ = self.stop.wait_for(|s| *s) => return None,
            };
            match received {
                Ok(e) => self.backlog.push_back(e),
                // fell behind the broadcast buffer: refill from the log
                Err(broadcast::error::RecvError::Lagged(_)) => self.backlog.extend(self.shared.events_after(self.last_id)),
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    }
}

/// Server-sent events, one verifier event per message with the event id as
/// the SSE id. A reconnecting client's `Last-Event-ID` resumes after that
/// event instead of replaying the whole log.
async fn get_events(State(app): State<AppState>, headers: HeaderMap) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let resume = headers
        .get("last-event-id")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<u64>().ok())
        .unwrap_or(0);
    let rx = app.shared.subscribe();
    let cursor = EventCursor {
        backlog: app.shared.events_after(resume).into(),
        shared: app.shared,
        rx,
        stop: app.stop,
        last_id: resume,
    };
    let events = stream::unfold(cursor, |mut c| async move {
        let e = c.next().await?;
        let data = serde_json::to_string(&e).expect("events serialize");
        Some((Ok(Event::default().id(e.event_id.to_string()).data(data)), c))
    });
    Sse::new(events).keep_alive(KeepAlive::default())
}
