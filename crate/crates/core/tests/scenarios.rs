//! Closed-loop runs: simulated sessions replayed through the full engine.

use stageverify_core::fsm::{ErrorKind, VerifierEvent};
use stageverify_core::model::ThresholdConfig;
use stageverify_core::plan::builtin_hdd_plan;
use stageverify_core::replay::{read_replay, write_replay, ReplayRecord};
use stageverify_core::session::sim::{simulate_scenario, Scenario};
use stageverify_core::session::{run_replay, ControlCommand, ControlError, Engine, Outcome, ReplayRun, SessionError};

fn replay(scenario: Scenario, seed: u64) -> (ReplayRun, stageverify_core::session::sim::ScenarioTruth) {
    let plan = builtin_hdd_plan();
    let sim = simulate_scenario(&plan, scenario, seed).unwrap();
    let bytes = write_replay(&sim.records).unwrap();
    (run_replay(&bytes, &plan, &ThresholdConfig::default()).unwrap(), sim.truth)
}

fn errors(run: &ReplayRun) -> Vec<(u32, ErrorKind)> {
    run.events
        .iter()
        .filter_map(|e| match &e.event {
            VerifierEvent::ErrorDetected { stage, detail } => Some((*stage, detail.kind())),
            _ => None,
        })
        .collect()
}

#[test]
fn happy_runs_complete_cleanly_across_seeds() {
    for seed in 1..=4 {
        let (run, _) = replay(Scenario::Happy, seed);
        assert_eq!(run.report.outcome, Outcome::Complete, "seed {seed}");
        assert_eq!(run.report.totals.stages_completed, 21);
        assert!(errors(&run).is_empty(), "seed {seed}: {:?}", errors(&run));
        assert!(run.report.stages.iter().all(|s| s.attempts == 1 && s.duration_ms.is_some()));
    }
}

#[test]
fn cheat_is_refused_on_the_cheated_stage() {
    for seed in 1..=3 {
        let (run, truth) = replay(Scenario::CheatScrew, seed);
        let stage = truth.fault_stage.unwrap();
        assert_eq!(errors(&run), vec![(stage, ErrorKind::ScrewNotTightened)], "seed {seed}");
        assert_eq!(run.report.outcome, Outcome::Complete);
        let rec = &run.report.stages[stage as usize - 1];
        assert_eq!(rec.attempts, 2);
        assert_eq!(rec.errors[0].guidance_key, "guidance.retighten");
    }
}

#[test]
fn wrong_part_is_flagged_and_recovered() {
    for seed in 1..=3 {
        let (run, truth) = replay(Scenario::WrongPart, seed);
        assert_eq!(errors(&run), vec![(truth.fault_stage.unwrap(), ErrorKind::WrongPart)], "seed {seed}");
        assert_eq!(run.report.outcome, Outcome::Complete);
    }
}

#[test]
fn skip_attempt_never_advances_early() {
    let (run, truth) = replay(Scenario::SkipAttempt, 2);
    let stage = truth.fault_stage.unwrap();
    assert!(errors(&run).iter().any(|&(s, k)| s == stage && k == ErrorKind::WrongPart));
    let entered: Vec<u32> = run
        .events
        .iter()
        .filter_map(|e| match e.event {
            VerifierEvent::StageEntered { ordinal } => Some(ordinal),
            _ => None,
        })
        .collect();
    assert_eq!(entered, (1..=21).collect::<Vec<_>>());
}

#[test]
fn truncated_replay_ends_aborted() {
    let plan = builtin_hdd_plan();
    let sim = simulate_scenario(&plan, Scenario::Happy, 1).unwrap();
    let half: Vec<ReplayRecord> = sim.records[..sim.records.len() / 2].to_vec();
    let run = run_replay(&write_replay(&half).unwrap(), &plan, &ThresholdConfig::default()).unwrap();
    assert_eq!(run.report.outcome, Outcome::Aborted);
    assert!(run.report.totals.stages_completed < 21);
    let md = run.report.to_markdown();
    assert_eq!(md.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| #")).count(), 21);
}

#[test]
fn replay_for_another_plan_is_rejected() {
    let plan = builtin_hdd_plan();
    let mut records = simulate_scenario(&plan, Scenario::Happy, 1).unwrap().records;
    records.truncate(50);
    if let ReplayRecord::Meta { plan_id, .. } = &mut records[0] {
        *plan_id = "other".into();
    }
    let err = run_replay(&write_replay(&records).unwrap(), &plan, &ThresholdConfig::default()).unwrap_err();
    assert!(matches!(err, SessionError::PlanMismatch { .. }));
}

#[test]
fn report_round_trips_through_json() {
    let (run, _) = replay(Scenario::WrongPart, 1);
    let json = run.report.to_json_pretty();
    let back = stageverify_core::session::OperationReport::from_json(&json).unwrap();
    assert_eq!(back, run.report);
    assert_eq!(back.to_json_pretty(), json);
}

#[test]
fn pause_holds_the_stage_clock() {
    let plan = builtin_hdd_plan();
    let records = read_replay(&write_replay(&simulate_scenario(&plan, Scenario::Happy, 1).unwrap().records).unwrap()).unwrap();
    let cfg = ThresholdConfig::default();
    let mut engine = Engine::with_reference_classifier(plan, cfg.clone(), "pause".into(), 0).unwrap();
    let mut it = records.iter().skip(1).peekable();
    let mut now = 0;
    // run a little, then pause for a minute of wall time with no input
    while now < 2_000 {
        while let Some(r) = it.next_if(|r| r.t_ms().unwrap_or(0) <= now) {
            engine.ingest(r);
        }
        engine.tick(now).unwrap();
        now += cfg.tick_ms;
    }
    let snap = engine.control(ControlCommand::Pause, now).unwrap();
    assert!(snap.paused);
    let before = engine.events().len();
    for k in 0..2_000 {
        engine.tick(now + k * cfg.tick_ms).unwrap();
    }
    assert_eq!(engine.events().len(), before, "a paused session emits nothing, not even NullAction");
    let resume_at = now + 2_000 * cfg.tick_ms;
    assert!(!engine.control(ControlCommand::Resume, resume_at).unwrap().paused);
    assert!(engine.state().stage_entered_ms >= resume_at - now - cfg.tick_ms);

    engine.abort(resume_at + 1);
    assert_eq!(engine.report().outcome, Outcome::Aborted);
    assert_eq!(engine.control(ControlCommand::Pause, resume_at + 2), Err(ControlError::Ended));
}
