//! `empc`: run closed-loop scenarios and plot their traces.

mod plot;

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use embedded_mpc::{metrics, sim, RunStatus, Scenario, ScenarioFile, SimTrace};
use log::{error, info};

/// Scenario file could not be parsed or validated.
const EXIT_INVALID: u8 = 2;
/// Run failed, diverged, or violated constraints in strict mode.
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "empc", version, about = "Embedded MPC closed-loop simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one or more scenario files.
    Run {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Fail when any logged constraint value exceeds the scenario's strict tolerance.
        #[arg(long)]
        strict: bool,
        /// Dotted-path override such as `flow.alpha=1e3`; repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory for CSV and plot files.
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Render SVG plots from a trace CSV.
    Plot {
        csv: PathBuf,
        /// Scenario file used to draw constraint lines.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Output directory; defaults to the CSV's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => EXIT_INVALID,
            Failure::Runtime(_) => EXIT_RUNTIME,
        }
    }

    fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Invalid(e) | Failure::Runtime(e) => e,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { files, strict, overrides, out } => {
            let results: Vec<(PathBuf, Result<String, Failure>)> = std::thread::scope(|scope| {
                let handles: Vec<_> = files
                    .iter()
                    .map(|f| {
                        let (overrides, out) = (&overrides, &out);
                        scope.spawn(move || run_one(f, overrides, out, strict))
                    })
                    .collect();
                files
                    .iter()
                    .cloned()
                    .zip(handles.into_iter().map(|h| h.join().expect("worker panicked")))
                    .collect()
            });
            let mut code = 0;
            for (file, result) in results {
                match result {
                    Ok(report) => print!("{report}"),
                    Err(f) => {
                        eprintln!("{}: {:#}", file.display(), f.error());
                        code = code.max(f.code());
                    }
                }
            }
            ExitCode::from(code)
        }
        Command::Plot { csv, scenario, out } => match plot_command(&csv, scenario.as_deref(), out.as_deref()) {
            Ok(paths) => {
                for p in paths {
                    println!("{}", p.display());
                }
                ExitCode::SUCCESS
            }
            Err(f) => {
                eprintln!("{}: {:#}", csv.display(), f.error());
                ExitCode::from(f.code())
            }
        },
    }
}

fn load_scenario(path: &Path, overrides: &[String]) -> Result<Scenario, Failure> {
    let file = ScenarioFile::load(path, overrides).map_err(|e| Failure::Invalid(e.into()))?;
    file.build().map_err(|e| Failure::Invalid(e.into()))
}

fn run_one(path: &Path, overrides: &[String], out: &Path, strict: bool) -> Result<String, Failure> {
    let scenario = load_scenario(path, overrides)?;
    info!("running {}", scenario.name);
    let outcome = sim::run(&scenario).map_err(|e| Failure::Runtime(e.into()))?;
    let runtime = |e: anyhow::Error| Failure::Runtime(e);

    std::fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(runtime)?;
    let csv_name = scenario.output.csv.clone().unwrap_or_else(|| format!("{}.csv", scenario.name));
    let csv_path = out.join(csv_name);
    let file = File::create(&csv_path)
        .with_context(|| format!("creating {}", csv_path.display()))
        .map_err(runtime)?;
    outcome.trace.write_csv(std::io::BufWriter::new(file)).map_err(|e| runtime(e.into()))?;
    if scenario.output.plot {
        let stem = csv_path.file_stem().and_then(|s| s.to_str()).unwrap_or("trace").to_string();
        plot::write_plots(&outcome.trace, Some(&scenario), out, &stem).map_err(runtime)?;
    }

    let diverged = matches!(outcome.status, RunStatus::Diverged { .. });
    let m = metrics(&outcome.trace, scenario.gamma.as_slice(), diverged).map_err(|e| runtime(e.into()))?;
    let mut report = format!("[{}]\ncsv = {}\n{}", scenario.name, csv_path.display(), m.render());
    if let Some((t, margin)) = outcome.diagnostics.feasibility_violation {
        report.push_str(&format!("feasibility_warning = terminal margin {margin:.3e} at t = {t}\n"));
    }
    if let RunStatus::Diverged { t, reason } = &outcome.status {
        error!("{}: diverged at t = {t}: {reason}", scenario.name);
        print!("{report}");
        return Err(Failure::Runtime(anyhow::anyhow!("diverged at t = {t}: {reason}")));
    }
    if strict && m.max_constraint_value > scenario.output.strict_tolerance {
        print!("{report}");
        return Err(Failure::Runtime(anyhow::anyhow!(
            "strict mode: max constraint value {:.6e} exceeds {:.1e}",
            m.max_constraint_value,
            scenario.output.strict_tolerance
        )));
    }
    Ok(report)
}

fn plot_command(csv: &Path, scenario: Option<&Path>, out: Option<&Path>) -> Result<Vec<PathBuf>, Failure> {
    let file = File::open(csv)
        .with_context(|| format!("opening {}", csv.display()))
        .map_err(Failure::Invalid)?;
    let trace = SimTrace::read_csv(BufReader::new(file)).map_err(|e| Failure::Invalid(e.into()))?;
    let scenario = scenario.map(|p| load_scenario(p, &[])).transpose()?;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| csv.parent().map(Path::to_path_buf).unwrap_or_default());
    let stem = csv.file_stem().and_then(|s| s.to_str()).unwrap_or("trace");
    plot::write_plots(&trace, scenario.as_ref(), &dir, stem).map_err(Failure::Invalid)
}
