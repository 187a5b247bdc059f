//! `stageverify`: verify recorded sessions, generate fixtures, and run the
//! live station server.
//!
//! Exit status: 0 success, 1 verification finished with errors (under
//! `--strict`) or did not finish, 2 invalid input, 3 runtime failure.

mod commands;
mod live;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use stageverify_core::model::ThresholdConfig;

#[derive(Debug, Parser)]
#[command(name = "stageverify", version, about = "Stage verification for manual hard-drive assembly")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Replay a recorded session through the verifier and write its report.
    Verify(VerifyArgs),
    /// Generate a recorded session from a scripted scenario.
    Simulate(SimulateArgs),
    /// Run the live station: screw link, observation stream and HTTP surface.
    Serve(ServeArgs),
    /// Assembly plan tools.
    #[command(subcommand)]
    Plan(PlanCommand),
    /// Operation report tools.
    #[command(subcommand)]
    Report(ReportCommand),
    /// Orientation reference tools.
    #[command(subcommand)]
    Angle(AngleCommand),
    /// Play the hole reports of a recording as a screw-camera node.
    SimNode(SimNodeArgs),
    /// Stream a recording into a live station, optionally with its camera node.
    Feed(FeedArgs),
}

#[derive(Debug, Args)]
struct PlanSource {
    /// Plan JSON file [default: the built-in 21-stage hard-drive plan]
    #[arg(long, value_name = "PATH")]
    plan: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EngineArgs {
    #[command(flatten)]
    plan: PlanSource,
    /// Threshold configuration JSON; missing fields take their defaults
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Gesture template JSON [default: bundled templates]
    #[arg(long, value_name = "PATH")]
    templates: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// Recorded session (.replay.jsonl)
    #[arg(long, value_name = "PATH")]
    replay: PathBuf,
    /// Report output [default: next to the replay, as .report.json]
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
    /// Exit 1 if any error was detected
    #[arg(long)]
    strict: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScenarioArg {
    Happy,
    CheatScrew,
    WrongPart,
    SkipAttempt,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    plan: PlanSource,
    #[arg(long, value_enum)]
    scenario: ScenarioArg,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output replay file
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[command(flatten)]
    engine: EngineArgs,
    /// HTTP address for /state, /events, /report and /control
    #[arg(long, value_name = "HOST:PORT", default_value = "127.0.0.1:7700")]
    listen: SocketAddr,
    /// Screw-camera link address
    #[arg(long, value_name = "HOST:PORT", default_value = "127.0.0.1:7701")]
    screw_listen: SocketAddr,
    /// Local observation stream address
    #[arg(long, value_name = "HOST:PORT", default_value = "127.0.0.1:7702")]
    stream_listen: SocketAddr,
    /// Do not open the observation stream listener
    #[arg(long)]
    no_stream: bool,
    /// Live milliseconds per real millisecond
    #[arg(long, default_value_t = 1.0)]
    time_scale: f64,
    /// Where to write the report when the session ends
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
    /// Exit this many seconds after the session ends instead of serving until interrupted
    #[arg(long, value_name = "SECS")]
    exit_after: Option<f64>,
    #[arg(long, default_value = "live")]
    session_id: String,
}

#[derive(Debug, Subcommand)]
enum PlanCommand {
    /// Check a plan and list every violated rule.
    Validate {
        /// Plan JSON file [default: the built-in plan]
        path: Option<PathBuf>,
        /// Reject fields the plan schema does not know
        #[arg(long)]
        strict: bool,
    },
    /// Print the built-in plan as JSON.
    Show,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReportFormat {
    Json,
    Md,
}

#[derive(Debug, Subcommand)]
enum ReportCommand {
    /// Render a report JSON file.
    Render {
        path: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Md)]
        format: ReportFormat,
    },
}

#[derive(Debug, Subcommand)]
enum AngleCommand {
    /// Calibrate the 0° pose of a part from a PGM image.
    Calibrate {
        /// Image of the part in its reference placement (PGM)
        #[arg(long = "ref", value_name = "PGM")]
        reference: PathBuf,
        #[arg(long, value_name = "JSON")]
        out: PathBuf,
        /// Binarization threshold on intensities in [0, 1]
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Write the bundled actuator-arm silhouette as a PGM image.
    Fixture {
        #[arg(long, value_name = "PGM")]
        out: PathBuf,
        /// Image side length in pixels
        #[arg(long, default_value_t = 96)]
        size: usize,
    },
}

#[derive(Debug, Args)]
struct Pacing {
    /// Recorded session to play
    #[arg(long, value_name = "PATH")]
    replay: PathBuf,
    /// Live milliseconds per real millisecond; match the server's
    #[arg(long, default_value_t = 1.0)]
    time_scale: f64,
}

#[derive(Debug, Args)]
struct SimNodeArgs {
    #[command(flatten)]
    pacing: Pacing,
    /// Screw-link address of the station
    #[arg(long, value_name = "HOST:PORT", default_value = "127.0.0.1:7701")]
    connect: SocketAddr,
    #[arg(long, default_value = "sim-node")]
    session: String,
}

#[derive(Debug, Args)]
struct FeedArgs {
    #[command(flatten)]
    pacing: Pacing,
    /// Observation-stream address of the station
    #[arg(long, value_name = "HOST:PORT", default_value = "127.0.0.1:7702")]
    connect: SocketAddr,
    /// Also play the hole reports to this screw-link address, on the same clock
    #[arg(long, value_name = "HOST:PORT")]
    screw: Option<SocketAddr>,
}

/// How a command failed, which decides the exit status.
#[derive(Debug)]
enum Failure {
    /// Bad plan, replay, config or other input file.
    Input(anyhow::Error),
    /// Bind, network or write failure.
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Input(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }
}

trait Classify<T> {
    fn input(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn input(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Input(e.into()))
    }

    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

fn config_help() -> String {
    let defaults = serde_json::to_string_pretty(&ThresholdConfig::default()).expect("config serializes");
    format!("Threshold configuration defaults (--config overrides any subset):\n{defaults}")
}

fn main() -> ExitCode {
    let help = config_help();
    let cmd = Cli::command()
        .mut_subcommand("verify", |c| c.after_long_help(help.clone()))
        .mut_subcommand("serve", |c| c.after_long_help(help.clone()));
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Verify(a) => commands::verify(a),
        Command::Simulate(a) => commands::simulate(a),
        Command::Plan(c) => commands::plan(c),
        Command::Report(c) => commands::report(c),
        Command::Angle(c) => commands::angle(c),
        Command::Serve(a) => live::serve(a),
        Command::SimNode(a) => live::sim_node(a),
        Command::Feed(a) => live::feed(a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            let (Failure::Input(e) | Failure::Runtime(e)) = &f;
            eprintln!("error: {e:#}");
            ExitCode::from(f.code())
        }
    }
}
