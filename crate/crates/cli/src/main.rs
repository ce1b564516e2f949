//! `ackguard`: run the eavesdropper-detection simulator from the command line.
//!
//! Exit codes: 0 on success, 2 for invalid input (bad flags, bad scenario),
//! 1 for runtime failures (I/O, numerical, invariant violations).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ackguard_core::export::{
    calibration_tables, figure_tables, run_tables, summary_table, write_json, write_tables, Format,
};
use ackguard_core::network::AttackKind;
use ackguard_core::{calibrate, parse_scenario, parse_scenario_str, run_monte_carlo, run_once, Scenario};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

const MOVING_AVERAGE: &str = "moving-average";
const DEFAULT_GRID: [f64; 10] = [0.95, 0.96, 0.97, 0.975, 0.98, 0.985, 0.9865, 0.9875, 0.99, 0.995];

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] ackguard_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_validation() => 2,
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "ackguard", version, about = "Simulate remote estimation under an acknowledgment-blocking eavesdropper and detect it")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate one run and write its step, receipt, acknowledgment and alarm traces.
    Run(RunArgs),
    /// Run the Monte Carlo batch and write one summary row per detector and threshold.
    Mc(McArgs),
    /// Sweep thresholds, estimate the false-alarm rate of each, and pick one for a target rate.
    Calibrate(CalibrateArgs),
    /// Write the series behind the age, moving-average and posterior figures of one run.
    FiguresData(RunArgs),
    /// Re-run the invocation recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum OutputFormat {
    Csv,
    Json,
}

impl From<OutputFormat> for Format {
    fn from(f: OutputFormat) -> Self {
        match f {
            OutputFormat::Csv => Format::Csv,
            OutputFormat::Json => Format::Json,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AttackerArg {
    Passive,
    Selective,
    BlockAll,
}

impl From<AttackerArg> for AttackKind {
    fn from(a: AttackerArg) -> Self {
        match a {
            AttackerArg::Passive => AttackKind::Passive,
            AttackerArg::Selective => AttackKind::Selective,
            AttackerArg::BlockAll => AttackKind::BlockAll,
        }
    }
}

#[derive(Debug, Args)]
struct Common {
    /// Scenario file (TOML). Omitted fields take the reference values.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "ACKGUARD_OUT", default_value = "ackguard-out")]
    out: PathBuf,
    /// Master seed (overrides the scenario).
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "csv")]
    format: OutputFormat,
    /// Detector to keep: a detector name from the scenario (exact, misspec, sensor
    /// in the reference setup), moving-average, or all.
    #[arg(long, default_value = "all")]
    detector: String,
    /// Attacker behavior (overrides the scenario).
    #[arg(long, value_enum)]
    attacker: Option<AttackerArg>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Which run of the seed to simulate.
    #[arg(long, default_value_t = 0)]
    run_index: u64,
}

#[derive(Debug, Args)]
struct McArgs {
    #[command(flatten)]
    common: Common,
    /// Number of runs (overrides the scenario).
    #[arg(long)]
    runs: Option<u64>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    runs: Option<u64>,
    /// Comma-separated threshold grid.
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    /// False-alarm rate to calibrate each detector to.
    #[arg(long, default_value_t = 0.4)]
    target_pfa: f64,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for the reproduced files.
    #[arg(long, env = "ACKGUARD_OUT", default_value = "ackguard-replay")]
    out: PathBuf,
}

/// Everything needed to reproduce an invocation's files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    tool: String,
    version: String,
    command: String,
    run_index: u64,
    format: OutputFormat,
    detector: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    thresholds: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_pfa: Option<f64>,
    /// Fully resolved scenario, including seed, run count and detector selection.
    scenario: String,
    files: Vec<String>,
}

fn load_scenario(common: &Common, runs: Option<u64>) -> CliResult<Scenario> {
    let mut scenario = match &common.scenario {
        Some(path) => parse_scenario(path)?,
        None => parse_scenario_str("")?,
    };
    if let Some(seed) = common.seed {
        scenario.seed = seed;
    }
    if let Some(runs) = runs {
        scenario.runs = runs;
    }
    if let Some(a) = common.attacker {
        scenario.attacker = a.into();
    }
    match common.detector.as_str() {
        "all" => {}
        MOVING_AVERAGE => scenario.detectors.clear(),
        name => {
            if scenario.detector(name).is_none() {
                let known: Vec<_> = scenario.detectors.iter().map(|d| d.name.as_str()).collect();
                return Err(CliError::Usage(format!(
                    "--detector {name:?}: scenario has detectors {known:?}; also accepted: moving-average, all"
                )));
            }
            scenario.detectors.retain(|d| d.name == name);
        }
    }
    scenario.validate()?;
    Ok(scenario)
}

fn file_names(paths: &[PathBuf]) -> Vec<String> {
    paths
        .iter()
        .map(|p| p.file_name().expect("written files have names").to_string_lossy().into_owned())
        .collect()
}

struct Job {
    command: &'static str,
    scenario: Scenario,
    run_index: u64,
    format: OutputFormat,
    detector: String,
    thresholds: Option<Vec<f64>>,
    target_pfa: Option<f64>,
}

fn execute(job: &Job, out: &Path) -> CliResult<Vec<PathBuf>> {
    let format = Format::from(job.format);
    let scenario = &job.scenario;
    let mut written = match job.command {
        "run" => {
            let trace = run_once(scenario, job.run_index)?;
            write_tables(out, &run_tables(&trace, scenario.state_dim()), format)?
        }
        "figures-data" => {
            let trace = run_once(scenario, job.run_index)?;
            let (tables, annotations) = figure_tables(&trace, scenario)?;
            let mut files = write_tables(out, &tables, format)?;
            let path = out.join("annotations.json");
            write_json(&path, &annotations)?;
            files.push(path);
            files
        }
        "mc" => {
            if job.detector == MOVING_AVERAGE {
                return Err(CliError::Usage(
                    "the moving-average baseline has no stopping rule; use run or figures-data".into(),
                ));
            }
            let stats = run_monte_carlo(scenario)?;
            write_tables(out, &[("summary", summary_table(&stats))], format)?
        }
        "calibrate" => {
            if job.detector == MOVING_AVERAGE {
                return Err(CliError::Usage("the moving-average baseline has no threshold to calibrate".into()));
            }
            let grid = job.thresholds.clone().unwrap_or_else(|| DEFAULT_GRID.to_vec());
            let cal = calibrate(scenario, &grid, job.target_pfa)?;
            write_tables(out, &calibration_tables(&cal), format)?
        }
        other => return Err(CliError::Usage(format!("unknown command {other:?} in manifest"))),
    };

    let manifest = Manifest {
        tool: "ackguard".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: job.command.into(),
        run_index: job.run_index,
        format: job.format,
        detector: job.detector.clone(),
        thresholds: job.thresholds.clone(),
        target_pfa: job.target_pfa,
        scenario: scenario.to_toml(),
        files: file_names(&written),
    };
    let path = out.join("manifest.json");
    let value = serde_json::to_value(&manifest).expect("manifest serializes");
    write_json(&path, &value)?;
    written.push(path);
    Ok(written)
}

fn replay(args: &ReplayArgs) -> CliResult<Vec<PathBuf>> {
    let text = std::fs::read_to_string(&args.manifest).map_err(|e| CliError::Io {
        path: args.manifest.display().to_string(),
        message: e.to_string(),
    })?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: not a manifest: {e}", args.manifest.display())))?;
    let command = match manifest.command.as_str() {
        "run" => "run",
        "mc" => "mc",
        "calibrate" => "calibrate",
        "figures-data" => "figures-data",
        other => return Err(CliError::Usage(format!("unknown command {other:?} in manifest"))),
    };
    let job = Job {
        command,
        scenario: parse_scenario_str(&manifest.scenario)?,
        run_index: manifest.run_index,
        format: manifest.format,
        detector: manifest.detector,
        thresholds: manifest.thresholds,
        target_pfa: manifest.target_pfa,
    };
    execute(&job, &args.out)
}

fn dispatch(cli: Cli) -> CliResult<Vec<PathBuf>> {
    let single = |command: &'static str, args: RunArgs| -> CliResult<Vec<PathBuf>> {
        let job = Job {
            command,
            scenario: load_scenario(&args.common, None)?,
            run_index: args.run_index,
            format: args.common.format,
            detector: args.common.detector.clone(),
            thresholds: None,
            target_pfa: None,
        };
        execute(&job, &args.common.out)
    };
    match cli.command {
        Command::Run(args) => single("run", args),
        Command::FiguresData(args) => single("figures-data", args),
        Command::Mc(args) => {
            let job = Job {
                command: "mc",
                scenario: load_scenario(&args.common, args.runs)?,
                run_index: 0,
                format: args.common.format,
                detector: args.common.detector.clone(),
                thresholds: None,
                target_pfa: None,
            };
            execute(&job, &args.common.out)
        }
        Command::Calibrate(args) => {
            let job = Job {
                command: "calibrate",
                scenario: load_scenario(&args.common, args.runs)?,
                run_index: 0,
                format: args.common.format,
                detector: args.common.detector.clone(),
                thresholds: args.thresholds,
                target_pfa: Some(args.target_pfa),
            };
            execute(&job, &args.common.out)
        }
        Command::Replay(args) => replay(&args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
