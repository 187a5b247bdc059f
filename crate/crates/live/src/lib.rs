//! Live runtime: accepts the screw-camera link and the local observation
//! stream over TCP, runs the engine on a wall-clock tick and serves state,
//! events, reports and control over HTTP.

pub mod clock;
pub mod http;
pub mod link;
pub mod node;
pub mod orchestrator;
pub mod stream;

use std::future::Future;
use std::io;
use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use stageverify_core::gesture::WindowClassifier;
use stageverify_core::link::Clock;
use stageverify_core::model::ThresholdConfig;
use stageverify_core::plan::AssemblyPlan;
use stageverify_core::session::{ControlCommand, OperationReport, SessionError, StateSnapshot};
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::{JoinHandle, JoinSet};

pub use clock::LiveClock;
pub use orchestrator::{Input, Orchestrator, Shared, SourceId};

pub const DEFAULT_HTTP_PORT: u16 = 7700;
pub const DEFAULT_SCREW_PORT: u16 = 7701;
pub const DEFAULT_STREAM_PORT: u16 = 7702;

const INPUT_QUEUE: usize = 4096;

#[derive(Debug, Error)]
pub enum LiveError {
    #[error("cannot listen for {what} on {addr}: {source}")]
    Bind {
        what: &'static str,
        addr: SocketAddr,
        source: io::Error,
    },
    #[error("time scale must be finite and positive, got {0}")]
    TimeScale(f64),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("cannot write report to {}: {source}", path.display())]
    Report { path: PathBuf, source: io::Error },
    #[error("the session task stopped unexpectedly")]
    Stopped,
}

#[derive(Debug, Clone)]
pub struct LiveOptions {
    pub http: SocketAddr,
    pub screw: SocketAddr,
    /// Listener for the local observation stream; `None` disables it.
    pub stream: Option<SocketAddr>,
    /// Live milliseconds per real millisecond.
    pub time_scale: f64,
    /// Where the report JSON goes when the session ends.
    pub report_path: Option<PathBuf>,
    /// With `Some`, [`run_live`] returns this long after the session ends
    /// instead of serving until stopped.
    pub linger: Option<Duration>,
    pub session_id: String,
}

impl Default for LiveOptions {
    fn default() -> Self {
        let local = |port| SocketAddr::from((Ipv4Addr::LOCALHOST, port));
        LiveOptions {
            http: local(DEFAULT_HTTP_PORT),
            screw: local(DEFAULT_SCREW_PORT),
            stream: Some(local(DEFAULT_STREAM_PORT)),
            time_scale: 1.0,
            report_path: None,
            linger: None,
            session_id: "live".into(),
        }
    }
}

/// A running live session.
pub struct LiveServer {
    pub http_addr: SocketAddr,
    pub screw_addr: SocketAddr,
    pub stream_addr: Option<SocketAddr>,
    clock: LiveClock,
    shared: Arc<Shared>,
    inputs: mpsc::Sender<Input>,
    stop: watch::Sender<bool>,
    finished: watch::Receiver<Option<OperationReport>>,
    session: JoinHandle<Result<OperationReport, LiveError>>,
    http: JoinHandle<()>,
    listeners: Vec<JoinHandle<()>>,
}

async fn bind(what: &'static str, addr: SocketAddr) -> Result<TcpListener, LiveError> {
    TcpListener::bind(addr).await.map_err(|source| LiveError::Bind { what, addr, source })
}

fn local_addr(what: &'static str, l: &TcpListener, addr: SocketAddr) -> Result<SocketAddr, LiveError> {
    l.local_addr().map_err(|source| LiveError::Bind { what, addr, source })
}

/// Binds every listener and starts the session. Nothing is spawned unless
/// all binds succeed.
pub async fn start_live(
    plan: AssemblyPlan,
    cfg: ThresholdConfig,
    classifier: Box<dyn WindowClassifier + Send + Sync>,
    opts: LiveOptions,
) -> Result<LiveServer, LiveError> {
    let clock = LiveClock::new(opts.time_scale).ok_or(LiveError::TimeScale(opts.time_scale))?;
    let plan_id = plan.plan_id.clone();
    let orch = Orchestrator::new(plan, cfg, classifier, opts.session_id.clone())?;
    let tick_ms = orch.config().tick_ms;

    let http_listener = bind("HTTP", opts.http).await?;
    let screw_listener = bind("the screw link", opts.screw).await?;
    let stream_listener = match opts.stream {
        Some(addr) => Some(bind("the observation stream", addr).await?),
        None => None,
    };
    let http_addr = local_addr("HTTP", &http_listener, opts.http)?;
    let screw_addr = local_addr("the screw link", &screw_listener, opts.screw)?;
    let stream_addr = match (&stream_listener, opts.stream) {
        (Some(l), Some(addr)) => Some(local_addr("the observation stream", l, addr)?),
        _ => None,
    };

    let shared = orch.shared();
    let (tx, rx) = mpsc::channel(INPUT_QUEUE);
    let (stop, stop_rx) = watch::channel(false);
    let (done_tx, finished) = watch::channel(None);
    let ids = Arc::new(AtomicU64::new(1));

    let session = tokio::spawn(drive(orch, rx, clock, stop_rx.clone(), done_tx, opts.report_path.clone()));

    let app = http::router(http::AppState {
        shared: Arc::clone(&shared),
        inputs: tx.clone(),
        stop: stop_rx.clone(),
    });
    let mut http_stop = stop_rx.clone();
    let http = tokio::spawn(async move {
        let served = axum::serve(http_listener, app)
            .with_graceful_shutdown(async move {
                let _ = http_stop.wait_for(|s| *s).await;
            })
            .await;
        if let Err(e) = served {
            tracing::error!(error = %e, "HTTP server failed");
        }
    });

    let mut listeners = Vec::new();
    {
        let (tx, ids) = (tx.clone(), Arc::clone(&ids));
        listeners.push(tokio::spawn(accept_loop(screw_listener, "screw camera", move |sock, id| {
            tokio::spawn(link::serve_screw_link(sock, id, clock, tick_ms, tx.clone()))
        }, ids)));
    }
    if let Some(l) = stream_listener {
        let tx = tx.clone();
        listeners.push(tokio::spawn(accept_loop(l, "observation stream", move |sock, id| {
            let (tx, plan_id) = (tx.clone(), plan_id.clone());
            tokio::spawn(async move { stream::serve_stream(sock, id, &plan_id, tx).await })
        }, ids)));
    }

    tracing::info!(%http_addr, %screw_addr, stream = ?stream_addr, scale = clock.scale(), "live session listening");
    Ok(LiveServer {
        http_addr,
        screw_addr,
        stream_addr,
        clock,
        shared,
        inputs: tx,
        stop,
        finished,
        session,
        http,
        listeners,
    })
}

async fn accept_loop<T: Send + 'static>(
    listener: TcpListener,
    what: &'static str,
    spawn: impl Fn(tokio::net::TcpStream, SourceId) -> JoinHandle<T>,
    ids: Arc<AtomicU64>,
) {
    let mut conns = JoinSet::new();
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((sock, peer)) => {
                    let _ = sock.set_nodelay(true);
                    let id = ids.fetch_add(1, Ordering::Relaxed);
                    tracing::info!(source = id, %peer, "{what} connected");
                    let handle = spawn(sock, id);
                    conns.spawn(async move {
                        let _ = handle.await;
                    });
                }
                Err(e) => tracing::warn!(error = %e, "accept failed"),
            },
            Some(_) = conns.join_next() => {}
        }
    }
}

fn write_report(path: Option<&Path>, report: &OperationReport) -> Result<(), LiveError> {
    let Some(path) = path else { return Ok(()) };
    std::fs::write(path, report.to_json_pretty()).map_err(|source| LiveError::Report {
        path: path.to_path_buf(),
        source,
    })?;
    tracing::info!(path = %path.display(), "report written");
    Ok(())
}

/// The orchestrator activity. Runs the tick loop until stopped; a session
/// still running at that point is aborted so a report always exists.
async fn drive(
    mut orch: Orchestrator,
    mut rx: mpsc::Receiver<Input>,
    clock: LiveClock,
    mut stop: watch::Receiver<bool>,
    done: watch::Sender<Option<OperationReport>>,
    report_path: Option<PathBuf>,
) -> Result<OperationReport, LiveError> {
    let period = clock.real_duration(orch.config().tick_ms).max(Duration::from_millis(1));
    let mut interval = tokio::time::interval(period);
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    let mut written = Ok(());
    let mut finish = |report: OperationReport| {
        written = write_report(report_path.as_deref(), &report);
        done.send_replace(Some(report));
    };
    loop {
        let finished = tokio::select! {
            _ = interval.tick() => orch.tick(clock.now_ms()),
            Some(input) = rx.recv() => orch.handle(input, clock.now_ms()),
            _ = stop.wait_for(|s| *s) => break,
        };
        if let Some(report) = finished {
            finish(report);
        }
    }
    if let Some(report) = orch.abort(clock.now_ms()) {
        finish(report);
    }
    written?;
    Ok(orch.report())
}

impl LiveServer {
    pub fn shared(&self) -> &Arc<Shared> {
        &self.shared
    }

    pub fn clock(&self) -> LiveClock {
        self.clock
    }

    pub fn state(&self) -> StateSnapshot {
        self.shared.snapshot()
    }

    /// Sends an operator command, as `POST /control` does.
    pub async fn control(&self, cmd: ControlCommand) -> Result<StateSnapshot, String> {
        let (reply, answer) = oneshot::channel();
        self.inputs
            .send(Input::Control { cmd, reply })
            .await
            .map_err(|_| "session has already ended".to_string())?;
        answer.await.map_err(|_| "session has already ended".to_string())?
    }

    /// Waits until the session completes or is aborted, and its report has
    /// been written.
    pub async fn finished(&mut self) -> OperationReport {
        loop {
            if let Some(r) = self.finished.borrow_and_update().clone() {
                return r;
            }
            if self.finished.changed().await.is_err() {
                // the session task is gone; fall back to the published view
                return self.shared.report();
            }
        }
    }

    /// Stops every listener, aborting an unfinished session, and returns the
    /// final report.
    pub async fn shutdown(self) -> Result<OperationReport, LiveError> {
        self.stop.send_replace(true);
        let report = self.session.await.map_err(|_| LiveError::Stopped)?;
        for l in &self.listeners {
            l.abort();
        }
        let _ = self.http.await;
        report
    }
}

/// Runs a live session until `stop` resolves or, with a linger set, until
/// that long after the session ended. Returns the final report.
pub async fn run_live(
    plan: AssemblyPlan,
    cfg: ThresholdConfig,
    classifier: Box<dyn WindowClassifier + Send + Sync>,
    opts: LiveOptions,
    stop: impl Future<Output = ()>,
) -> Result<OperationReport, LiveError> {
    let linger = opts.linger;
    let mut server = start_live(plan, cfg, classifier, opts).await?;
    let lingered = async {
        match linger {
            Some(d) => {
                server.finished().await;
                tokio::time::sleep(d).await;
            }
            None => std::future::pending().await,
        }
    };
    tokio::select! {
        _ = stop => tracing::info!("stop requested"),
        _ = lingered => {}
    }
    server.shutdown().await
}
