//! A live session over real sockets: simulated camera node and detector
//! stream on one side, the HTTP surface on the other.

mod support;

use std::net::SocketAddr;
use std::time::Duration;

use serde_json::Value;
use stageverify_core::gesture::synth::reference_classifier;
use stageverify_core::model::ThresholdConfig;
use stageverify_core::plan::builtin_hdd_plan;
use stageverify_core::session::sim::{simulate_scenario, Scenario};
use stageverify_core::session::{ControlCommand, OperationReport, Outcome};
use stageverify_live::node::{origin_of, run_feeder, run_sim_node, split_replay};
use stageverify_live::{start_live, LiveClock, LiveError, LiveOptions, LiveServer};

/// Live milliseconds per real millisecond: the 3.5 minute session plays in
/// about seven seconds.
const SCALE: f64 = 30.0;

fn any_port() -> SocketAddr {
    "127.0.0.1:0".parse().unwrap()
}

fn options(scale: f64, report: Option<std::path::PathBuf>) -> LiveOptions {
    LiveOptions {
        http: any_port(),
        screw: any_port(),
        stream: Some(any_port()),
        time_scale: scale,
        report_path: report,
        linger: None,
        session_id: "live-test".into(),
    }
}

async fn start(scale: f64, report: Option<std::path::PathBuf>) -> LiveServer {
    start_live(builtin_hdd_plan(), ThresholdConfig::default(), Box::new(reference_classifier()), options(scale, report))
        .await
        .unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn happy_session_completes_live() {
    let dir = tempfile::tempdir().unwrap();
    let report_path = dir.path().join("report.json");
    let mut server = start(SCALE, Some(report_path.clone())).await;
    let http = server.http_addr;

    let records = simulate_scenario(&builtin_hdd_plan(), Scenario::Happy, 1).unwrap().records;
    let origin = origin_of(&records);
    let (stream, holes) = split_replay(&records);
    let clock = LiveClock::new(SCALE).unwrap();
    let (screw, stream_addr) = (server.screw_addr, server.stream_addr.unwrap());
    let node = tokio::spawn(async move { run_sim_node(screw, &holes, origin, clock, "live-test").await });
    let feeder = tokio::spawn(async move { run_feeder(stream_addr, &stream, origin, clock).await });

    // the dashboard view advances while the session runs
    let mut ordinals = Vec::new();
    let report = loop {
        let state = support::get(http, "/state").await;
        assert_eq!(state.status, 200);
        ordinals.push(state.json()["stage_ordinal"].as_u64().unwrap());
        if let Ok(r) = tokio::time::timeout(Duration::from_millis(250), server.finished()).await {
            break r;
        }
        assert!(ordinals.len() < 240, "session did not finish within a minute");
    };
    node.await.unwrap().unwrap();
    feeder.await.unwrap().unwrap();

    assert_eq!(report.outcome, Outcome::Complete, "{}", report.to_markdown());
    assert_eq!(report.totals.stages_completed, 21);
    assert!(ordinals.windows(2).all(|w| w[0] <= w[1]), "{ordinals:?}");
    assert!(ordinals.iter().collect::<std::collections::BTreeSet<_>>().len() > 2, "{ordinals:?}");

    let written = OperationReport::from_json(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(written, report);
    let served = support::get(http, "/report").await;
    assert_eq!(served.status, 200);
    assert_eq!(OperationReport::from_json(&served.body).unwrap(), report);

    // the full event log, then a resumed stream that skips what was seen
    let all = support::read_events(http, None, Duration::from_secs(5), |v| v["type"] == "AssemblyComplete").await;
    let ids: Vec<u64> = all.iter().map(|(id, _)| *id).collect();
    assert_eq!(ids, (1..=ids.len() as u64).collect::<Vec<_>>());
    assert!(all.iter().all(|(id, v)| v["event_id"].as_u64() == Some(*id)));
    let completed = all.iter().filter(|(_, v)| v["type"] == "StageCompleted").count();
    assert_eq!(completed, 21);
    let tail = support::read_events(http, Some(ids[ids.len() - 3]), Duration::from_secs(5), |v| v["type"] == "AssemblyComplete").await;
    assert_eq!(tail.iter().map(|(id, _)| *id).collect::<Vec<_>>(), ids[ids.len() - 2..].to_vec());

    let late = support::post(http, "/control", r#"{"type":"Pause"}"#).await;
    assert_eq!(late.status, 409);
    assert_eq!(late.json()["error"], "session has already ended");

    assert_eq!(server.shutdown().await.unwrap(), report);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn control_over_http() {
    let server = start(1.0, None).await;
    let http = server.http_addr;
    let pause = r#"{"type":"Pause"}"#;

    let early = support::post(http, "/control", pause).await;
    assert_eq!(early.status, 409, "{}", early.body);

    // one record starts the session
    let records = simulate_scenario(&builtin_hdd_plan(), Scenario::Happy, 1).unwrap().records;
    let (stream, _) = split_replay(&records);
    let clock = LiveClock::new(1000.0).unwrap();
    run_feeder(server.stream_addr.unwrap(), &stream[..2], origin_of(&stream), clock).await.unwrap();
    let started = async {
        while server.shared().event_count() == 0 {
            tokio::time::sleep(Duration::from_millis(10)).await;
        }
    };
    tokio::time::timeout(Duration::from_secs(5), started).await.unwrap();

    let paused = support::post(http, "/control", pause).await;
    assert_eq!(paused.status, 200, "{}", paused.body);
    assert_eq!(paused.json()["paused"], Value::Bool(true));
    assert_eq!(support::get(http, "/state").await.json()["paused"], Value::Bool(true));

    // event 1 is StageEntered, not guidance
    let ack = support::post(http, "/control", r#"{"type":"AcknowledgeGuidance","event_id":1}"#).await;
    assert_eq!(ack.status, 409);

    let resumed = support::post(http, "/control", r#"{"type":"Resume"}"#).await;
    assert_eq!(resumed.json()["paused"], Value::Bool(false));

    let aborted = server.control(ControlCommand::AbortSession).await.unwrap();
    assert_eq!(aborted.outcome, Outcome::Aborted);
    assert_eq!(support::get(http, "/report").await.json()["outcome"], "Aborted");
    assert_eq!(server.shutdown().await.unwrap().outcome, Outcome::Aborted);
}

#[tokio::test]
async fn shutdown_aborts_a_running_session_and_writes_its_report() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("aborted.json");
    let server = start(1.0, Some(path.clone())).await;
    let report = server.shutdown().await.unwrap();
    assert_eq!(report.outcome, Outcome::Aborted);
    assert_eq!(OperationReport::from_json(&std::fs::read_to_string(&path).unwrap()).unwrap(), report);
}

#[tokio::test]
async fn occupied_port_is_a_bind_error() {
    let first = start(1.0, None).await;
    let mut opts = options(1.0, None);
    opts.http = first.http_addr;
    let err = start_live(builtin_hdd_plan(), ThresholdConfig::default(), Box::new(reference_classifier()), opts)
        .await
        .err()
        .expect("the port is taken");
    assert!(matches!(err, LiveError::Bind { what: "HTTP", .. }), "{err}");
    first.shutdown().await.unwrap();
}

#[tokio::test]
async fn stream_for_another_plan_is_dropped() {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let server = start(1.0, None).await;
    let mut s = tokio::net::TcpStream::connect(server.stream_addr.unwrap()).await.unwrap();
    s.write_all(b"{\"type\":\"meta\",\"plan_id\":\"other\",\"schema\":1,\"tick_ms\":33}\n").await.unwrap();
    let mut buf = [0u8; 16];
    let n = tokio::time::timeout(Duration::from_secs(5), s.read(&mut buf)).await.unwrap().unwrap_or(0);
    assert_eq!(n, 0, "the server closes the connection");
    assert_eq!(server.shared().event_count(), 0);
    server.shutdown().await.unwrap();
}
