//! Offline commands: verify, simulate, plan, report and angle tools.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use stageverify_core::angle::fixtures::arm_image;
use stageverify_core::angle::{make_reference, AngleError, GrayGrid};
use stageverify_core::fsm::VerifierEvent;
use stageverify_core::gesture::synth::reference_classifier;
use stageverify_core::gesture::{templates_from_json, NearestTemplateClassifier, WindowClassifier};
use stageverify_core::model::ThresholdConfig;
use stageverify_core::plan::{builtin_hdd_plan, validate_plan, AssemblyPlan};
use stageverify_core::replay::write_replay;
use stageverify_core::session::sim::{simulate_scenario, Scenario};
use stageverify_core::session::{run_replay_with, OperationReport, Outcome, SessionError};

use crate::{AngleCommand, Classify, EngineArgs, Failure, PlanCommand, PlanSource, ReportCommand, ReportFormat, ScenarioArg, SimulateArgs, VerifyArgs};

fn read_text(path: &Path, what: &str) -> Result<String, Failure> {
    fs::read_to_string(path).with_context(|| format!("cannot read {what} {}", path.display())).input()
}

fn parse_plan(text: &str, strict: bool, origin: &str) -> Result<AssemblyPlan, Failure> {
    let plan = AssemblyPlan::from_json(text, strict).with_context(|| format!("plan {origin}")).input()?;
    let diagnostics = validate_plan(&plan);
    if diagnostics.is_empty() {
        return Ok(plan);
    }
    let list: Vec<String> = diagnostics.iter().map(|d| format!("  {d}")).collect();
    Err(Failure::Input(anyhow!("plan {origin} is invalid:\n{}", list.join("\n"))))
}

pub(crate) fn load_plan(src: &PlanSource) -> Result<AssemblyPlan, Failure> {
    match &src.plan {
        None => Ok(builtin_hdd_plan()),
        Some(p) => parse_plan(&read_text(p, "plan")?, false, &p.display().to_string()),
    }
}

pub(crate) fn load_config(path: Option<&Path>) -> Result<ThresholdConfig, Failure> {
    let Some(path) = path else {
        return Ok(ThresholdConfig::default());
    };
    let cfg: ThresholdConfig = serde_json::from_str(&read_text(path, "config")?)
        .with_context(|| format!("config {}", path.display()))
        .input()?;
    cfg.validate().with_context(|| format!("config {}", path.display())).input()?;
    Ok(cfg)
}

pub(crate) fn load_classifier(path: Option<&Path>) -> Result<Box<dyn WindowClassifier + Send + Sync>, Failure> {
    let Some(path) = path else {
        return Ok(Box::new(reference_classifier()));
    };
    let context = || format!("templates {}", path.display());
    let templates = templates_from_json(&read_text(path, "templates")?).with_context(context).input()?;
    Ok(Box::new(NearestTemplateClassifier::new(templates).with_context(context).input()?))
}

pub(crate) fn load_engine(args: &EngineArgs) -> Result<(AssemblyPlan, ThresholdConfig, Box<dyn WindowClassifier + Send + Sync>), Failure> {
    Ok((
        load_plan(&args.plan)?,
        load_config(args.config.as_deref())?,
        load_classifier(args.templates.as_deref())?,
    ))
}

fn default_report_path(replay: &Path) -> PathBuf {
    let name = replay.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let stem = name.strip_suffix(".replay.jsonl").or_else(|| name.strip_suffix(".jsonl")).unwrap_or(&name);
    replay.with_file_name(format!("{stem}.report.json"))
}

fn outcome_word(o: Outcome) -> &'static str {
    match o {
        Outcome::Complete => "complete",
        Outcome::Aborted => "aborted",
        Outcome::InProgress => "in-progress",
    }
}

/// The machine-readable summary line printed by `verify`.
pub(crate) fn summary_line(report: &OperationReport, stages: u32) -> String {
    format!(
        "RESULT {} {}/{} stages, {} errors, {:.1} s",
        outcome_word(report.outcome),
        report.totals.stages_completed,
        stages,
        report.totals.error_count,
        report.totals.total_ms as f64 / 1000.0
    )
}

pub(crate) fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Failure> {
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display())).runtime()
}

pub fn verify(a: VerifyArgs) -> Result<u8, Failure> {
    let (plan, cfg, classifier) = load_engine(&a.engine)?;
    let bytes = fs::read(&a.replay)
        .with_context(|| format!("cannot read replay {}", a.replay.display()))
        .input()?;
    let run = match run_replay_with(&bytes, &plan, &cfg, classifier) {
        Ok(run) => run,
        Err(e @ SessionError::Fsm(_)) => return Err(Failure::Runtime(anyhow!(e).context("verifier failed"))),
        Err(e) => return Err(Failure::Input(anyhow!(e).context(format!("replay {}", a.replay.display())))),
    };
    let report_path = a.report.unwrap_or_else(|| default_report_path(&a.replay));
    write_file(&report_path, run.report.to_json_pretty())?;

    for e in &run.events {
        if let VerifierEvent::ErrorDetected { stage, detail } = &e.event {
            println!("error at {:.2} s, stage {stage}: {:?}", e.t_ms as f64 / 1000.0, detail.kind());
        }
    }
    println!("{}", summary_line(&run.report, plan.len()));
    eprintln!("report written to {}", report_path.display());

    let failed = run.report.outcome != Outcome::Complete || (a.strict && run.report.totals.error_count > 0);
    Ok(u8::from(failed))
}

pub fn simulate(a: SimulateArgs) -> Result<u8, Failure> {
    let plan = load_plan(&a.plan)?;
    let scenario = match a.scenario {
        ScenarioArg::Happy => Scenario::Happy,
        ScenarioArg::CheatScrew => Scenario::CheatScrew,
        ScenarioArg::WrongPart => Scenario::WrongPart,
        ScenarioArg::SkipAttempt => Scenario::SkipAttempt,
    };
    let sim = simulate_scenario(&plan, scenario, a.seed).input()?;
    let bytes = write_replay(&sim.records).context("simulator produced an invalid recording").runtime()?;
    write_file(&a.out, &bytes)?;
    let span = sim.records.iter().filter_map(|r| r.t_ms()).max().unwrap_or(0);
    println!(
        "wrote {} records ({:.1} simulated s, scenario {scenario}, seed {}) to {}",
        sim.records.len(),
        span as f64 / 1000.0,
        a.seed,
        a.out.display()
    );
    Ok(0)
}

pub fn plan(c: PlanCommand) -> Result<u8, Failure> {
    match c {
        PlanCommand::Show => {
            println!("{}", builtin_hdd_plan().to_json_pretty());
            Ok(0)
        }
        PlanCommand::Validate { path, strict } => {
            let plan = match &path {
                None => parse_plan(&builtin_hdd_plan().to_json_pretty(), strict, "built-in")?,
                Some(p) => parse_plan(&read_text(p, "plan")?, strict, &p.display().to_string())?,
            };
            println!("plan {}: {} stages, valid", plan.plan_id, plan.len());
            Ok(0)
        }
    }
}

pub fn report(c: ReportCommand) -> Result<u8, Failure> {
    let ReportCommand::Render { path, format } = c;
    let report = OperationReport::from_json(&read_text(&path, "report")?)
        .with_context(|| format!("report {}", path.display()))
        .input()?;
    match format {
        ReportFormat::Json => println!("{}", report.to_json_pretty()),
        ReportFormat::Md => print!("{}", report.to_markdown()),
    }
    Ok(0)
}

pub fn angle(c: AngleCommand) -> Result<u8, Failure> {
    let (reference, out, threshold) = match c {
        AngleCommand::Calibrate { reference, out, threshold } => (reference, out, threshold),
        AngleCommand::Fixture { out, size } => {
            if size < 16 {
                return Err(Failure::Input(anyhow!("--size {size} is too small; use at least 16")));
            }
            write_file(&out, arm_image(size).to_pgm())?;
            println!("wrote a {size}x{size} arm silhouette to {}", out.display());
            return Ok(0);
        }
    };
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Failure::Input(anyhow!("--threshold {threshold} must lie strictly between 0 and 1")));
    }
    let bytes = fs::read(&reference)
        .with_context(|| format!("cannot read image {}", reference.display()))
        .input()?;
    let img = GrayGrid::from_pgm(&bytes).with_context(|| format!("image {}", reference.display())).input()?;
    let source = reference.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let descriptor = match make_reference(&img, threshold, &source) {
        Ok(d) => d,
        Err(e @ AngleError::AmbiguousOrientation) => return Err(Failure::Input(anyhow!("AmbiguousOrientation: {e}"))),
        Err(e) => return Err(Failure::Input(anyhow!(e).context(format!("image {}", reference.display())))),
    };
    write_file(&out, descriptor.to_json())?;
    println!("reference pose at {:.2} degrees written to {}", descriptor.theta_ref_deg, out.display());
    Ok(0)
}
