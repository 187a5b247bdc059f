//! Networked commands: the live station and the clients that drive it.

use std::fs;
use std::time::Duration;

use anyhow::{anyhow, Context};
use stageverify_core::replay::{read_replay, ReplayRecord};
use stageverify_live::node::{origin_of, run_feeder, run_sim_node, split_replay};
use stageverify_live::{run_live, LiveClock, LiveError, LiveOptions};

use crate::commands::{load_engine, summary_line};
use crate::{Classify, FeedArgs, Failure, Pacing, ServeArgs, SimNodeArgs};

fn init_logging() {
    let _ = tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(tracing::Level::INFO)
        .try_init();
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .context("cannot start the async runtime")
        .runtime()
}

/// Resolves on Ctrl-C or, on Unix, SIGTERM.
async fn terminated() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        if let Ok(mut term) = signal(SignalKind::terminate()) {
            tokio::select! {
                _ = tokio::signal::ctrl_c() => {}
                _ = term.recv() => {}
            }
            return;
        }
    }
    let _ = tokio::signal::ctrl_c().await;
}

fn clock(scale: f64) -> Result<LiveClock, Failure> {
    LiveClock::new(scale).ok_or_else(|| Failure::Input(anyhow!("--time-scale {scale} must be finite and positive")))
}

pub fn serve(a: ServeArgs) -> Result<u8, Failure> {
    init_logging();
    let (plan, cfg, classifier) = load_engine(&a.engine)?;
    clock(a.time_scale)?;
    let linger = match a.exit_after {
        None => None,
        Some(s) if s.is_finite() && s >= 0.0 => Some(Duration::from_secs_f64(s)),
        Some(s) => return Err(Failure::Input(anyhow!("--exit-after {s} must be a nonnegative number of seconds"))),
    };
    let stages = plan.len();
    let opts = LiveOptions {
        http: a.listen,
        screw: a.screw_listen,
        stream: (!a.no_stream).then_some(a.stream_listen),
        time_scale: a.time_scale,
        report_path: a.report,
        linger,
        session_id: a.session_id,
    };
    let report = runtime()?
        .block_on(run_live(plan, cfg, classifier, opts, terminated()))
        .map_err(|e| match e {
            LiveError::TimeScale(_) | LiveError::Session(_) => Failure::Input(e.into()),
            other => Failure::Runtime(other.into()),
        })?;
    println!("{}", summary_line(&report, stages));
    Ok(0)
}

fn load_recording(p: &Pacing) -> Result<Vec<ReplayRecord>, Failure> {
    let bytes = fs::read(&p.replay)
        .with_context(|| format!("cannot read replay {}", p.replay.display()))
        .input()?;
    read_replay(&bytes).with_context(|| format!("replay {}", p.replay.display())).input()
}

pub fn sim_node(a: SimNodeArgs) -> Result<u8, Failure> {
    init_logging();
    let records = load_recording(&a.pacing)?;
    let clock = clock(a.pacing.time_scale)?;
    let origin = origin_of(&records);
    let (_, holes) = split_replay(&records);
    runtime()?
        .block_on(run_sim_node(a.connect, &holes, origin, clock, &a.session))
        .with_context(|| format!("screw link {}", a.connect))
        .runtime()?;
    println!("sent {} hole messages to {}", holes.len(), a.connect);
    Ok(0)
}

pub fn feed(a: FeedArgs) -> Result<u8, Failure> {
    init_logging();
    let records = load_recording(&a.pacing)?;
    let clock = clock(a.pacing.time_scale)?;
    let origin = origin_of(&records);
    let (stream, holes) = split_replay(&records);
    let rt = runtime()?;
    let sent_holes = rt.block_on(async {
        let feeder = async {
            run_feeder(a.connect, &stream, origin, clock)
                .await
                .with_context(|| format!("observation stream {}", a.connect))
        };
        let node = async {
            match a.screw {
                Some(addr) => run_sim_node(addr, &holes, origin, clock, "feed")
                    .await
                    .map(|()| holes.len())
                    .with_context(|| format!("screw link {addr}")),
                None => Ok(0),
            }
        };
        let (fed, node) = tokio::join!(feeder, node);
        fed.and(node)
    });
    let sent_holes = sent_holes.runtime()?;
    println!("sent {} records and {sent_holes} hole messages", stream.len());
    Ok(0)
}
