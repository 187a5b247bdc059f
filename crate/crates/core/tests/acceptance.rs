//! Acceptance suite. Each criterion prints one `PASS` or `FAIL` line; the
//! process exits non-zero if any criterion fails. It runs without the libtest
//! harness so the lines always appear, in a fixed order.

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use stageverify_core::angle::fixtures::arm_image;
use stageverify_core::angle::{estimate_angle, gen_rotated_sample, make_reference, oracle_angle};
use stageverify_core::depth::DepthTrack;
use stageverify_core::fsm::{step, ErrorDetail, ErrorKind, FusedObservation, Phase, VerifierEvent, VerifierState};
use stageverify_core::gesture::synth::base_templates;
use stageverify_core::gesture::{
    done_heuristic, normalize_hand, DoneParams, HandFrame, NearestTemplateClassifier, WindowClassifier, DEFAULT_KEYPOINTS,
    INDEX_TIP, MIDDLE_TIP, PINKY_TIP, RING_TIP, THUMB_TIP,
};
use stageverify_core::link::{
    decode_message, encode_message, run_link_session, Clock, HoleAggregate, HoleReport, HoleState, LinkMessage, LinkOutcome,
    LinkTransport, ProtocolErrorKind, Recv, WireReport,
};
use stageverify_core::model::{circ_diff, ActionConfidence, Detection, DetectionFrame, ObjAngle, PartClass, ThresholdConfig, TimeMs};
use stageverify_core::plan::{builtin_hdd_plan, AssemblyPlan, StageKind};
use stageverify_core::replay::{read_replay, write_replay, ReplayRecord};
use stageverify_core::session::sim::{simulate_scenario, Scenario};
use stageverify_core::session::{run_replay, run_replay_observed, Outcome};
use stageverify_core::gesture::synth::reference_classifier;

/// Named checks behind one criterion, plus free-form measurements.
#[derive(Default)]
struct Verdict {
    failed: Vec<String>,
    notes: Vec<String>,
}

impl Verdict {
    fn check(&mut self, what: impl Into<String>, ok: bool) {
        if !ok {
            self.failed.push(what.into());
        }
    }

    fn note(&mut self, what: impl Into<String>) {
        self.notes.push(what.into());
    }
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 9] = [
        ("happy-path end-to-end", happy_path),
        ("cheating robustness", cheating_robustness),
        ("no-skip property", no_skip),
        ("angle accuracy", angle_accuracy),
        ("rotated-sample label uniformity", label_uniformity),
        ("depth filter", depth_filter),
        ("wire protocol", wire_protocol),
        ("gesture baseline", gesture_baseline),
        ("replay determinism", replay_determinism),
    ];
    let mut failures = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Verdict {
                failed: vec![format!("panicked: {msg}")],
                notes: Vec::new(),
            }
        });
        let secs = start.elapsed().as_secs_f64();
        let ok = verdict.failed.is_empty();
        if !ok {
            failures += 1;
        }
        let mut detail = verdict.notes.join("; ");
        if !ok {
            detail = format!("failed: {} | {detail}", verdict.failed.join("; "));
        }
        println!("{} {name} [{secs:.2} s]: {detail}", if ok { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}

fn count_completed(events: &[stageverify_core::session::LoggedEvent]) -> Vec<u32> {
    events
        .iter()
        .filter_map(|e| match e.event {
            VerifierEvent::StageCompleted { ordinal, .. } => Some(ordinal),
            _ => None,
        })
        .collect()
}

fn happy_path() -> Verdict {
    let mut v = Verdict::default();
    let plan = builtin_hdd_plan();
    let start = Instant::now();
    let sim = simulate_scenario(&plan, Scenario::Happy, 1).expect("happy scenario");
    let bytes = write_replay(&sim.records).expect("simulated replay is valid");
    let sim_time = start.elapsed();
    let verify_start = Instant::now();
    let run = run_replay(&bytes, &plan, &ThresholdConfig::default()).expect("replay verifies");
    let verify_time = verify_start.elapsed();
    let total_time = start.elapsed();

    let completed = count_completed(&run.events);
    let errors = run.events.iter().filter(|e| matches!(e.event, VerifierEvent::ErrorDetected { .. })).count();
    let total_ms = run.report.totals.total_ms;
    v.check("outcome Complete", run.report.outcome == Outcome::Complete);
    v.check("21 StageCompleted events in order", completed == (1..=21).collect::<Vec<_>>());
    v.check("report counts 21 completed stages", run.report.totals.stages_completed == 21);
    v.check("0 errors", errors == 0 && run.report.totals.error_count == 0);
    v.check("simulated duration 210 ± 20 s", (190_000..=230_000).contains(&total_ms));
    v.check("wall-clock < 10 s", total_time < Duration::from_secs(10));
    v.note(format!(
        "{:?}, {}/21 stages, {errors} errors, simulated {:.1} s, simulate {:.2} s + verify {:.2} s",
        run.report.outcome,
        completed.len(),
        total_ms as f64 / 1000.0,
        sim_time.as_secs_f64(),
        verify_time.as_secs_f64()
    ));
    v
}

/// For each stage, the first tick at which the verifier sat in
/// `StageComplete` for it.
fn replay_with_trace(records: &[ReplayRecord], plan: &AssemblyPlan) -> (stageverify_core::session::ReplayRun, HashSet<Phase>, BTreeMap<u32, TimeMs>) {
    let bytes = write_replay(records).expect("valid replay");
    let mut phases = HashSet::new();
    let mut done_at = BTreeMap::new();
    let run = run_replay_observed(&bytes, plan, &ThresholdConfig::default(), Box::new(reference_classifier()), |t, s| {
        phases.insert(s.phase);
        if s.phase == Phase::StageComplete {
            done_at.entry(s.stage_ordinal).or_insert(t);
        }
    })
    .expect("replay verifies");
    (run, phases, done_at)
}

fn cheating_robustness() -> Verdict {
    let mut v = Verdict::default();
    let plan = builtin_hdd_plan();
    let cfg = ThresholdConfig::default();
    for seed in [1, 2, 3] {
        let sim = simulate_scenario(&plan, Scenario::CheatScrew, seed).expect("cheat scenario");
        let (run, phases, done_at) = replay_with_trace(&sim.records, &plan);
        let cheats = run
            .events
            .iter()
            .filter(|e| matches!(&e.event, VerifierEvent::ErrorDetected { detail, .. } if detail.kind() == ErrorKind::ScrewNotTightened))
            .count();
        v.check(format!("seed {seed}: ≥ 1 ScrewNotTightened"), cheats >= 1);
        v.check(format!("seed {seed}: phase visits ScrewAssemblyCorrection"), phases.contains(&Phase::ScrewAssemblyCorrection));

        // first qualifying Assembled report per hole, straight from the input
        let mut first_assembled: BTreeMap<&str, TimeMs> = BTreeMap::new();
        for r in &sim.records {
            if let ReplayRecord::Holes { t_ms, reports } = r {
                for w in reports {
                    if w.state == HoleState::Assembled && w.conf >= cfg.hole_min_conf {
                        first_assembled.entry(w.hole.as_str()).or_insert(*t_ms);
                    }
                }
            }
        }
        let mut early = Vec::new();
        for stage in plan.stages.iter().filter(|s| s.kind == StageKind::ScrewFastening) {
            let Some(&done) = done_at.get(&stage.ordinal) else { continue };
            for h in &stage.holes {
                if first_assembled.get(h.as_str()).is_none_or(|&t| t > done) {
                    early.push(format!("{}@{}", stage.id, h));
                }
            }
        }
        v.check(format!("seed {seed}: screw stages complete only after Assembled ({early:?})"), early.is_empty());
        if seed == 1 {
            v.note(format!("seed 1: {cheats} ScrewNotTightened, outcome {:?}", run.report.outcome));
        }
    }

    let (violations, reached, refusals) = screw_fuzz(10_000);
    v.check("fuzz: no screw stage completes without an Assembled report", violations == 0);
    v.note(format!(
        "fuzz: {violations}/10000 sequences completed a screw stage; {reached} sat in a screw stage, {refusals} ScrewNotTightened raised"
    ));
    v
}

// ---------------------------------------------------------------------------
// Random observation sequences

const FUZZ_STEPS: usize = 300;

fn stage_angle(plan: &AssemblyPlan, k: u32) -> Option<f64> {
    let stage = plan.stage(k)?;
    if let Some(a) = stage.angle {
        return Some(a.expected_deg);
    }
    stage
        .verify_parts
        .iter()
        .filter_map(|&p| plan.placement_of(p, k).and_then(|s| s.angle))
        .map(|a| a.expected_deg)
        .next()
}

/// An observation in which every part sits at its planned place, every hand
/// action is confident and every hole reads `holes`.
fn golden(plan: &AssemblyPlan, k: u32, t: TimeMs, holes: HoleState) -> FusedObservation {
    let stage = plan.stage(k).expect("ordinal within plan");
    let mut obs = FusedObservation::empty(t);
    let mut dets = Vec::new();
    for part in PartClass::ALL {
        let spec = if stage.part == Some(part) { Some(stage) } else { plan.placement_of(part, k) };
        let (cx, cy) = spec.and_then(|s| s.target).map_or((0.5, 0.5), |r| (r.cx, r.cy));
        let depth = spec.and_then(|s| s.expected_depth_mm);
        dets.push(Detection::new(part, cx, cy, 0.05, 0.05, 0.95, depth).unwrap());
        if let Some(d) = depth {
            obs.depth.insert(part, d);
        }
    }
    obs.detections = Some(DetectionFrame { t_ms: t, detections: dets });
    obs.acf = Some(ActionConfidence::from_array(t, [0.95; 4]));
    obs.obj_angle = Some(ObjAngle {
        t_ms: t,
        degrees: stage_angle(plan, k).unwrap_or(0.0),
        conf: 0.9,
    });
    for h in plan.holes.keys() {
        obs.holes.insert(h.clone(), holes);
    }
    obs
}

/// Drops a random part of a golden observation.
fn perturb(mut obs: FusedObservation, rng: &mut ChaCha8Rng) -> FusedObservation {
    match rng.random_range(0..5) {
        0 => obs.acf = None,
        1 => obs.obj_angle = None,
        2 => {
            if let Some(f) = obs.detections.as_mut() {
                let n = f.detections.len();
                f.detections.remove(rng.random_range(0..n));
            }
        }
        3 => {
            let t = obs.tick_ms;
            let mut a = [0.95; 4];
            a[rng.random_range(0..4)] = rng.random_range(0.0..0.8);
            obs.acf = Some(ActionConfidence::from_array(t, a));
        }
        _ => obs.wrists = vec![(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))],
    }
    obs
}

fn random_obs(plan: &AssemblyPlan, t: TimeMs, rng: &mut ChaCha8Rng, hole_states: &[HoleState]) -> FusedObservation {
    let mut obs = FusedObservation::empty(t);
    if rng.random_bool(0.8) {
        let mut dets = Vec::new();
        for _ in 0..rng.random_range(0..6) {
            let part = PartClass::ALL[rng.random_range(0..PartClass::ALL.len())];
            let depth = rng.random_bool(0.7).then(|| rng.random_range(550.0..700.0));
            let d = Detection::new(
                part,
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                rng.random_range(0.01..0.2),
                rng.random_range(0.01..0.2),
                rng.random_range(0.0..1.0),
                depth,
            )
            .unwrap();
            if let Some(dm) = depth {
                obs.depth.insert(part, dm);
            }
            dets.push(d);
        }
        obs.detections = Some(DetectionFrame { t_ms: t, detections: dets });
    }
    if rng.random_bool(0.8) {
        let a = [(); 4].map(|_| rng.random_range(0.0..1.0));
        obs.acf = Some(ActionConfidence::from_array(t, a));
    }
    if rng.random_bool(0.5) {
        obs.obj_angle = Some(ObjAngle {
            t_ms: t,
            degrees: rng.random_range(0.0..360.0),
            conf: rng.random_range(0.0..1.0),
        });
    }
    for _ in 0..rng.random_range(0..3) {
        obs.wrists.push((rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)));
    }
    for h in plan.holes.keys() {
        if rng.random_bool(0.8) {
            obs.holes.insert(h.clone(), hole_states[rng.random_range(0..hole_states.len())]);
        }
    }
    obs
}

#[derive(Clone, Copy)]
enum Mode {
    GoldenHere,
    GoldenAnywhere(u32),
    Perturbed,
    Random,
    Null,
}

fn pick_mode(plan: &AssemblyPlan, rng: &mut ChaCha8Rng) -> Mode {
    match rng.random_range(0..100) {
        0..45 => Mode::GoldenHere,
        45..55 => Mode::GoldenAnywhere(rng.random_range(1..=plan.len())),
        55..70 => Mode::Perturbed,
        70..90 => Mode::Random,
        _ => Mode::Null,
    }
}

fn fuzz_config(rng: &mut ChaCha8Rng) -> ThresholdConfig {
    ThresholdConfig {
        hold_ticks: [1, 2, 3, 5, 10][rng.random_range(0..5)],
        ..ThresholdConfig::default()
    }
}

/// Drives one random sequence. `hole_obs` fills in the hole states of each
/// observation; `visit` sees every transition.
#[allow(clippy::too_many_arguments)]
fn drive(
    plan: &AssemblyPlan,
    rng: &mut ChaCha8Rng,
    mut state: VerifierState,
    cfg: &ThresholdConfig,
    golden_holes: HoleState,
    hole_states: &[HoleState],
    mut hole_obs: impl FnMut(TimeMs, &mut FusedObservation, &mut ChaCha8Rng),
    mut visit: impl FnMut(&VerifierState, &VerifierState, &[VerifierEvent]),
) {
    let mut t = state.stage_entered_ms;
    let mut mode = Mode::Null;
    let mut left = 0;
    for _ in 0..FUZZ_STEPS {
        if left == 0 {
            mode = pick_mode(plan, rng);
            left = rng.random_range(1..=40);
        }
        left -= 1;
        t += if rng.random_bool(0.01) { rng.random_range(0..6000) } else { cfg.tick_ms };
        let mut obs = match mode {
            Mode::GoldenHere => golden(plan, state.stage_ordinal, t, golden_holes),
            Mode::GoldenAnywhere(k) => golden(plan, k, t, golden_holes),
            Mode::Perturbed => perturb(golden(plan, state.stage_ordinal, t, golden_holes), rng),
            Mode::Random => random_obs(plan, t, rng, hole_states),
            Mode::Null => FusedObservation::empty(t),
        };
        hole_obs(t, &mut obs, rng);
        let (next, events) = step(&state, &obs, plan, cfg).expect("state stays consistent with the plan");
        visit(&state, &next, &events);
        state = next;
    }
}

/// Sequences in which no hole is ever reported Assembled. Returns the number
/// of sequences in which a stage with holes completed, how many sequences
/// spent time in a screw stage, and the number of refusals raised.
fn screw_fuzz(n: u64) -> (usize, usize, usize) {
    let plan = builtin_hdd_plan();
    let screw_stages: Vec<u32> = plan.stages.iter().filter(|s| s.kind == StageKind::ScrewFastening).map(|s| s.ordinal).collect();
    let with_holes: BTreeSet<u32> = plan.stages.iter().filter(|s| !s.holes.is_empty()).map(|s| s.ordinal).collect();
    let hole_ids: Vec<String> = plan.holes.keys().cloned().collect();
    let mut violations = 0;
    let mut reached = 0;
    let mut refusals = 0;
    for seed in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5c2e_0000 + seed);
        let cfg = fuzz_config(&mut rng);
        let (mut state, _) = VerifierState::start(&plan, 0).unwrap();
        if rng.random_bool(0.5) {
            state.stage_ordinal = screw_stages[rng.random_range(0..screw_stages.len())];
            state.phase = Phase::ScrewAssembly;
        }
        // hole states come from the real aggregation over reports that are
        // never Assembled
        let mut agg = HoleAggregate::new();
        let mut silent = false;
        let mut bad = false;
        let mut in_screw = false;
        drive(
            &plan,
            &mut rng,
            state,
            &cfg,
            HoleState::Empty,
            &[HoleState::Empty, HoleState::InProcess],
            |t, obs, rng| {
                if rng.random_bool(0.02) {
                    silent = !silent;
                }
                let mut reports = Vec::new();
                if !silent {
                    for h in &hole_ids {
                        if rng.random_bool(0.7) {
                            reports.push(HoleReport {
                                hole_id: h.clone(),
                                state: if rng.random_bool(0.5) { HoleState::Empty } else { HoleState::InProcess },
                                conf: rng.random_range(0.0..1.0),
                                t_ms: t,
                            });
                        }
                    }
                }
                agg.update(t, &reports, &cfg);
                obs.holes = agg.summary().iter().map(|(h, s)| (h.clone(), s.state)).collect();
            },
            |_, next, events| {
                in_screw |= matches!(next.phase, Phase::ScrewAssembly | Phase::ScrewAssemblyCorrection);
                for e in events {
                    match e {
                        VerifierEvent::StageCompleted { ordinal, .. } if with_holes.contains(ordinal) => bad = true,
                        VerifierEvent::ErrorDetected {
                            detail: ErrorDetail::ScrewNotTightened { .. },
                            ..
                        } => refusals += 1,
                        _ => {}
                    }
                }
            },
        );
        violations += usize::from(bad);
        reached += usize::from(in_screw);
    }
    (violations, reached, refusals)
}

fn no_skip() -> Verdict {
    let mut v = Verdict::default();
    let plan = builtin_hdd_plan();
    let mut broken = Vec::new();
    let mut max_reached = BTreeMap::<u32, usize>::new();
    let mut finished = 0;
    for seed in 0..10_000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(0x0051_0000 + seed);
        let cfg = fuzz_config(&mut rng);
        let (state, _) = VerifierState::start(&plan, 0).unwrap();
        let mut completed = BTreeSet::new();
        let mut ok = true;
        let mut top = 1;
        let mut done = false;
        drive(
            &plan,
            &mut rng,
            state,
            &cfg,
            HoleState::Assembled,
            &[HoleState::Empty, HoleState::InProcess, HoleState::Assembled, HoleState::Unknown],
            |_, _, _| {},
            |prev, next, events| {
                for e in events {
                    match e {
                        VerifierEvent::StageCompleted { ordinal, .. } => {
                            completed.insert(*ordinal);
                        }
                        VerifierEvent::StageEntered { ordinal } => ok &= (1..*ordinal).all(|k| completed.contains(&k)),
                        VerifierEvent::AssemblyComplete { .. } => done = true,
                        _ => {}
                    }
                }
                let (a, b) = (prev.stage_ordinal, next.stage_ordinal);
                ok &= b >= a && b - a <= 1 && b <= plan.len();
                ok &= (1..b).all(|k| completed.contains(&k));
                top = top.max(b);
            },
        );
        if !ok {
            broken.push(seed);
        }
        finished += usize::from(done);
        *max_reached.entry(top).or_default() += 1;
    }
    v.check(format!("ordinal monotone, +1 steps, earlier stages completed (bad seeds {broken:?})"), broken.is_empty());
    let deepest = max_reached.keys().max().copied().unwrap_or(0);
    let past_five: usize = max_reached.range(6..).map(|(_, n)| n).sum();
    v.note(format!(
        "10000 sequences, {} violations; {past_five} reached stage ≥ 6, deepest {deepest}, {finished} completed the plan",
        broken.len()
    ));
    v
}

fn angle_accuracy() -> Verdict {
    let mut v = Verdict::default();
    let start = Instant::now();
    let img = arm_image(96);
    let reference = make_reference(&img, 0.5, "arm").expect("fixture is asymmetric");
    let mut rng = ChaCha8Rng::seed_from_u64(0xa11e);
    let mut errors = Vec::new();
    let mut worst_oracle: f64 = 0.0;
    let mut degenerate = 0;
    for _ in 0..100 {
        let sample = gen_rotated_sample(&img, &mut rng);
        let Ok(est) = estimate_angle(&sample.image, &reference, 0.5) else {
            degenerate += 1;
            continue;
        };
        errors.push(circ_diff(est.degrees, sample.label_deg).unwrap());
        match oracle_angle(&sample.image, &reference) {
            Ok(o) => worst_oracle = worst_oracle.max(circ_diff(est.degrees, o as f64).unwrap()),
            Err(_) => degenerate += 1,
        }
    }
    let elapsed = start.elapsed();
    let mean = errors.iter().sum::<f64>() / errors.len().max(1) as f64;
    let max = errors.iter().copied().fold(0.0, f64::max);
    v.check("every rotation estimated", errors.len() == 100);
    v.check("mean circular error ≤ 2°", mean <= 2.0);
    v.check("max circular error ≤ 5°", max <= 5.0);
    v.check("oracle agreement ≤ 1°", worst_oracle <= 1.0);
    v.check("runtime < 30 s", elapsed < Duration::from_secs(30));
    v.note(format!(
        "mean {mean:.3}°, max {max:.3}°, worst oracle gap {worst_oracle:.3}°, {degenerate} degenerate, {:.2} s",
        elapsed.as_secs_f64()
    ));
    v
}

fn label_uniformity() -> Verdict {
    let mut v = Verdict::default();
    // the label does not depend on image content; a small grid keeps this quick
    let img = arm_image(16);
    let mut rng = ChaCha8Rng::seed_from_u64(0x36b1);
    let n = 10_000;
    let mut bins = [0u32; 36];
    for _ in 0..n {
        let s = gen_rotated_sample(&img, &mut rng);
        bins[((s.label_deg / 10.0) as usize).min(35)] += 1;
    }
    let expected = n as f64 / 36.0;
    let chi2: f64 = bins.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let limit = ChiSquared::new(35.0).unwrap().inverse_cdf(0.999);
    v.check("chi-square below the 0.999 quantile", chi2 < limit);
    v.note(format!("chi2 {chi2:.2} vs limit {limit:.2} (35 dof)"));
    v
}

fn lower_median_oracle(window: &[f64]) -> f64 {
    let mut w = window.to_vec();
    w.sort_by(|a, b| a.partial_cmp(b).unwrap());
    w[(w.len() - 1) / 2]
}

fn depth_filter() -> Verdict {
    let mut v = Verdict::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0xde97);
    let mut mismatches = 0;
    let mut outputs = 0;
    for _ in 0..10_000 {
        let cap = rng.random_range(1..=9);
        let mut track = DepthTrack::new(cap, 1.0);
        let mut seen = Vec::new();
        for _ in 0..rng.random_range(cap..=3 * cap) {
            let x = if rng.random_bool(0.2) {
                rng.random_range(1..2000) as f64
            } else {
                rng.random_range(0.5..2000.0)
            };
            seen.push(x);
            let out = track.push(x);
            let window = &seen[seen.len().saturating_sub(cap)..];
            outputs += 1;
            if out != Some(lower_median_oracle(window)) {
                mismatches += 1;
            }
        }
    }
    v.check("alpha=1 equals the sort-based median", mismatches == 0);

    let mut shifted = Vec::new();
    for alpha in [1.0, 0.3] {
        for spike in [500.0, -500.0] {
            for at in 1..20 {
                let mut track = DepthTrack::new(5, alpha);
                for i in 0..20 {
                    let x = if i == at { 100.0 + spike } else { 100.0 };
                    let out = track.push(x).expect("stream starts with a valid sample");
                    if out != 100.0 {
                        shifted.push(format!("alpha {alpha} spike {spike:+} at {at}: {out}"));
                    }
                }
            }
        }
    }
    v.check(format!("single ±500 mm spike shifts nothing {shifted:?}"), shifted.is_empty());
    v.note(format!(
        "10000 random windows ({outputs} outputs), {mismatches} mismatches; spike shift 0 mm over {} placements",
        2 * 2 * 19
    ));
    v
}

// ---------------------------------------------------------------------------
// Wire protocol

fn arb_message() -> impl Strategy<Value = LinkMessage> {
    let text = "[a-zA-Z0-9 _\\-\"\\\\/é\u{1F527}]{0,16}";
    let state = prop_oneof![Just(HoleState::Empty), Just(HoleState::InProcess), Just(HoleState::Assembled)];
    let report = ("[A-Z][0-9]{1,2}", state, 0.0f64..=1.0).prop_map(|(hole, state, conf)| WireReport { hole, state, conf });
    let t = 0u64..(1 << 53);
    prop_oneof![
        (text, text).prop_map(|(role, session)| LinkMessage::Hello { role, session, proto: 1 }),
        (text, 1u64..10_000).prop_map(|(session, tick_ms)| LinkMessage::Ack { session, tick_ms }),
        (t.clone(), prop::collection::vec(report, 0..8)).prop_map(|(t_ms, reports)| LinkMessage::Holes { t_ms, reports }),
        t.prop_map(|t_ms| LinkMessage::Heartbeat { t_ms }),
        text.prop_map(|reason| LinkMessage::Bye { reason }),
    ]
}

struct MockClock(Cell<TimeMs>);

impl Clock for MockClock {
    fn now_ms(&self) -> TimeMs {
        self.0.get()
    }
}

/// Transport that polls every `poll_ms` on the mock clock. Scripted lines
/// arrive at the first poll at or after their timestamp.
struct Polling<'a> {
    clock: &'a MockClock,
    poll_ms: TimeMs,
    script: VecDeque<(TimeMs, Vec<u8>)>,
    sent: Vec<LinkMessage>,
}

impl LinkTransport for Polling<'_> {
    fn recv(&mut self, _deadline: TimeMs) -> std::io::Result<Recv> {
        let now = self.clock.now_ms();
        if self.script.front().is_some_and(|(t, _)| *t <= now) {
            return Ok(Recv::Data(self.script.pop_front().unwrap().1));
        }
        self.clock.0.set(now + self.poll_ms);
        Ok(Recv::Idle)
    }

    fn send(&mut self, bytes: &[u8]) -> std::io::Result<()> {
        self.sent.push(decode_message(bytes).expect("server sends valid lines"));
        Ok(())
    }
}

fn run_script(script: Vec<(TimeMs, Vec<u8>)>, poll_ms: TimeMs) -> (LinkOutcome, Vec<HoleReport>, Vec<LinkMessage>, TimeMs) {
    let clock = MockClock(Cell::new(0));
    let mut tr = Polling {
        clock: &clock,
        poll_ms,
        script: script.into(),
        sent: Vec::new(),
    };
    let mut delivered = Vec::new();
    let outcome = run_link_session(&mut tr, &clock, 33, |r| delivered.extend(r));
    (outcome, delivered, tr.sent, clock.now_ms())
}

fn hello() -> Vec<u8> {
    encode_message(&LinkMessage::Hello {
        role: "hole_camera".into(),
        session: "acc".into(),
        proto: 1,
    })
}

fn wire_protocol() -> Verdict {
    let mut v = Verdict::default();
    let mut runner = TestRunner::new_with_rng(
        Config {
            cases: 10_000,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    );
    let roundtrip = runner.run(&arb_message(), |m| {
        let bytes = encode_message(&m);
        prop_assert_eq!(bytes.last(), Some(&b'\n'));
        prop_assert_eq!(decode_message(&bytes).unwrap(), m);
        Ok(())
    });
    v.check(format!("round-trip identity {:?}", roundtrip.as_ref().err()), roundtrip.is_ok());

    // holes before hello
    let holes = encode_message(&LinkMessage::Holes {
        t_ms: 1,
        reports: vec![WireReport {
            hole: "H1".into(),
            state: HoleState::Assembled,
            conf: 0.9,
        }],
    });
    let (outcome, delivered, sent, _) = run_script(vec![(0, holes)], 1);
    let bad_sequence = matches!(&outcome, LinkOutcome::Protocol(e) if e.kind == ProtocolErrorKind::BadSequence);
    v.check(format!("Holes before Hello → BadSequence (got {outcome:?})"), bad_sequence && delivered.is_empty() && sent.is_empty());

    // out-of-vocabulary state
    let full = br#"{"type":"holes","t":1,"reports":[{"hole":"H1","state":"full","conf":0.5}]}"#.to_vec();
    let (outcome, delivered, sent, _) = run_script(vec![(0, hello()), (1, [full, b"\n".to_vec()].concat())], 1);
    let field_range = matches!(&outcome, LinkOutcome::Protocol(e) if e.kind == ProtocolErrorKind::FieldRange);
    let acked = matches!(sent.as_slice(), [LinkMessage::Ack { .. }]);
    v.check(format!("state \"full\" → FieldRange (got {outcome:?})"), field_range && delivered.is_empty() && acked);

    // silence for 3001 ms after the Ack
    let hb = |t| encode_message(&LinkMessage::Heartbeat { t_ms: t });
    let (outcome, _, sent, _) = run_script(vec![(0, hello()), (3001, hb(3001))], 1);
    let timed_out = matches!(outcome, LinkOutcome::HeartbeatTimeout { .. });
    v.check(format!("3001 ms silence after Ack → HeartbeatTimeout (got {outcome:?})"), timed_out && sent.len() == 1);
    // and 2999 ms is still alive
    let bye = encode_message(&LinkMessage::Bye { reason: "done".into() });
    let (outcome, _, _, _) = run_script(vec![(0, hello()), (2999, hb(2999)), (5990, bye)], 1);
    v.check(format!("2999 ms gaps keep the link (got {outcome:?})"), outcome == LinkOutcome::Clean { reason: "done".into() });

    // detection latency on a polling mock clock
    let mut latencies = Vec::new();
    for (last, poll) in [(0, 10), (2000, 10), (4013, 10), (1000, 33), (7777, 50), (250, 100)] {
        let mut script = vec![(0, hello())];
        script.extend((1..=last / 1000).map(|k| (k * 1000, hb(k * 1000))));
        if last % 1000 != 0 {
            script.push((last, hb(last)));
        }
        let (outcome, _, _, detected_at) = run_script(script, poll);
        // the line is read at the first poll at or after its timestamp
        let heard = last.div_ceil(poll) * poll;
        let latency = detected_at - heard;
        let matches_outcome = outcome == LinkOutcome::HeartbeatTimeout { silent_ms: latency };
        latencies.push(latency);
        v.check(format!("timeout reported for last message at {last} ms (got {outcome:?})"), matches_outcome);
    }
    let in_band = latencies.iter().all(|l| (3000..=3100).contains(l));
    v.check(format!("heartbeat loss detected within 3000-3100 ms {latencies:?}"), in_band);
    v.note(format!("10000 round trips; 3 error cases reproduced; detection latencies {latencies:?} ms"));
    v
}

// ---------------------------------------------------------------------------
// Gesture baseline

fn frame(points: Vec<[f64; 3]>) -> HandFrame {
    HandFrame { t_ms: 0, points }
}

fn gesture_baseline() -> Verdict {
    let mut v = Verdict::default();
    let templates = base_templates();
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e57);
    let plain = NearestTemplateClassifier::new(templates.clone()).unwrap();
    let centered = NearestTemplateClassifier::new(templates.clone()).unwrap().centered();
    let argmax = |s: [f64; 4]| (0..4).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
    let (mut hits_plain, mut hits_centered, mut total) = (0, 0, 0);
    for i in 0..200 {
        let t = &templates[i % templates.len()];
        let x: Vec<f64> = t.features.iter().map(|f| f + noise.sample(&mut rng)).collect();
        let want = t.label.index();
        hits_plain += usize::from(argmax(plain.classify(&x).unwrap()) == want);
        hits_centered += usize::from(argmax(centered.classify(&x).unwrap()) == want);
        total += 1;
    }
    let acc_plain = hits_plain as f64 / total as f64;
    let acc_centered = hits_centered as f64 / total as f64;
    v.check("plain nearest-template accuracy ≥ 90%", acc_plain >= 0.9);
    v.check("centered nearest-template accuracy ≥ 90%", acc_centered >= 0.9);

    let params = DoneParams::default();
    // a normalized hand: wrist at the origin, farthest keypoint at distance 1
    let mut pinch = vec![[0.0; 3]; DEFAULT_KEYPOINTS];
    pinch[1] = [0.0, -1.0, 0.0];
    pinch[THUMB_TIP] = [-0.25, 0.45, 0.0];
    pinch[INDEX_TIP] = [-0.25, 0.45, 0.0];
    pinch[MIDDLE_TIP] = [0.0, 0.9, 0.0];
    pinch[RING_TIP] = [0.9 * 0.6, 0.9 * 0.8, 0.0];
    pinch[PINKY_TIP] = [0.9, 0.0, 0.0];
    let d = done_heuristic(&normalize_hand(&frame(pinch)).unwrap(), params).unwrap();
    v.check(format!("pinch with tips at 0.9 → done, conf 1 (got {d:?})"), d.is_done && d.conf == 1.0);

    let mut open = vec![[0.0; 3]; DEFAULT_KEYPOINTS];
    open[THUMB_TIP] = [-0.8, 0.45, 0.0];
    open[INDEX_TIP] = [-0.3, 0.95, 0.0];
    open[MIDDLE_TIP] = [0.0, 1.0, 0.0];
    open[RING_TIP] = [0.3, 0.95, 0.0];
    open[PINKY_TIP] = [0.6, 0.8, 0.0];
    let d = done_heuristic(&normalize_hand(&frame(open)).unwrap(), params).unwrap();
    v.check(format!("open flat hand → not done (got {d:?})"), !d.is_done);

    let mut fist = vec![[0.0; 3]; DEFAULT_KEYPOINTS];
    fist[2] = [1.0, 0.0, 0.0];
    fist[THUMB_TIP] = [0.15, 0.3, 0.0];
    fist[INDEX_TIP] = [0.15, 0.3, 0.0];
    fist[MIDDLE_TIP] = [0.05, 0.3, 0.0];
    fist[RING_TIP] = [-0.05, 0.28, 0.0];
    fist[PINKY_TIP] = [-0.15, 0.25, 0.0];
    let d = done_heuristic(&normalize_hand(&frame(fist)).unwrap(), params).unwrap();
    v.check(format!("closed fist with touching thumb/index → not done (got {d:?})"), !d.is_done);

    v.note(format!(
        "argmax accuracy {:.1}% plain, {:.1}% centered on {total} noisy variants; 3/3 pose examples checked",
        100.0 * acc_plain,
        100.0 * acc_centered
    ));
    v
}

// ---------------------------------------------------------------------------
// Replay determinism

fn arb_record(t: TimeMs) -> impl Strategy<Value = ReplayRecord> {
    let unit = 0.0f64..=1.0;
    let part = prop::sample::select(PartClass::ALL.to_vec());
    let detection = (part, unit.clone(), unit.clone(), unit.clone(), unit.clone(), unit.clone(), prop::option::of(1.0f64..3000.0))
        .prop_map(|(p, cx, cy, w, h, c, d)| Detection::new(p, cx, cy, w, h, c, d).unwrap());
    let state = prop::sample::select(vec![HoleState::Empty, HoleState::InProcess, HoleState::Assembled]);
    let report = ("[A-Z][0-9]{1,2}", state, unit.clone()).prop_map(|(hole, state, conf)| WireReport { hole, state, conf });
    prop_oneof![
        prop::collection::vec(detection, 0..5).prop_map(move |detections| ReplayRecord::Det(DetectionFrame { t_ms: t, detections })),
        (0u32..3, prop::collection::vec(prop::array::uniform3(-2.0f64..2.0), 1..22))
            .prop_map(move |(hand_index, points)| ReplayRecord::Hand { hand_index, frame: HandFrame { t_ms: t, points } }),
        (0.0f64..360.0, unit.clone()).prop_map(move |(degrees, conf)| ReplayRecord::Angle(ObjAngle { t_ms: t, degrees, conf })),
        prop::collection::vec(report, 0..5).prop_map(move |reports| ReplayRecord::Holes { t_ms: t, reports }),
        prop::array::uniform4(unit).prop_map(move |a| ReplayRecord::Acf(ActionConfidence::from_array(t, a))),
    ]
}

fn arb_replay() -> impl Strategy<Value = Vec<ReplayRecord>> {
    (1u64..200, "[a-z0-9_]{1,12}", prop::collection::vec(0u64..100, 0..40)).prop_flat_map(|(tick_ms, plan_id, gaps)| {
        let mut t = 0;
        let recs: Vec<_> = gaps
            .into_iter()
            .map(|g| {
                t += g;
                arb_record(t)
            })
            .collect();
        recs.prop_map(move |mut v| {
            v.insert(
                0,
                ReplayRecord::Meta {
                    plan_id: plan_id.clone(),
                    schema: 1,
                    tick_ms,
                },
            );
            v
        })
    })
}

fn replay_determinism() -> Verdict {
    let mut v = Verdict::default();
    let plan = builtin_hdd_plan();
    let cfg = ThresholdConfig::default();
    let mut compared = 0;
    for (scenario, seed) in [(Scenario::Happy, 1), (Scenario::CheatScrew, 1), (Scenario::WrongPart, 5)] {
        let fixture = write_replay(&simulate_scenario(&plan, scenario, seed).unwrap().records).unwrap();
        let a = run_replay(&fixture, &plan, &cfg).unwrap();
        let b = run_replay(&fixture, &plan, &cfg).unwrap();
        let name = scenario.as_str();
        v.check(format!("{name}: JSON reports byte-identical"), a.report.to_json_pretty() == b.report.to_json_pretty());
        v.check(format!("{name}: Markdown reports byte-identical"), a.report.to_markdown() == b.report.to_markdown());
        v.check(format!("{name}: event logs identical"), a.events == b.events);
        let reread = write_replay(&read_replay(&fixture).unwrap()).unwrap();
        v.check(format!("{name}: fixture re-reads and re-writes byte-identically"), reread == fixture);
        compared += 1;
    }

    let mut runner = TestRunner::new_with_rng(
        Config {
            cases: 2_000,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    );
    let roundtrip = runner.run(&arb_replay(), |records| {
        let bytes = write_replay(&records).unwrap();
        prop_assert_eq!(&read_replay(&bytes).unwrap(), &records);
        prop_assert_eq!(write_replay(&records).unwrap(), bytes);
        Ok(())
    });
    v.check(format!("randomized read/write round trip {:?}", roundtrip.as_ref().err()), roundtrip.is_ok());
    v.note(format!("{compared} fixtures verified twice with identical reports; 2000 randomized replays round-tripped"));
    v
}
