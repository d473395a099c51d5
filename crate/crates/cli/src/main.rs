use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hydropipe::calib::{fit_from_pairs, parse_calibration_pairs};
use hydropipe::report;
use hydropipe::scenario::Scenario;
use hydropipe::sim;

/// Water-quality telemetry pipeline simulator.
#[derive(Parser)]
#[command(name = "hydropipe", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its artifacts and report.
    Run {
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory [default: runs/<scenario name>].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the report of a finished run directory.
    Report { run_dir: PathBuf },
    /// Fit a pH curve from a file of `raw_counts buffer_pH` pairs.
    Calibrate { pairs_file: PathBuf },
    /// Print the published target envelopes.
    Tables,
}

fn fail(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("hydropipe: {msg}");
    ExitCode::from(2)
}

fn verdict(report: &report::Report) -> ExitCode {
    if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn output_dir(flag: Option<PathBuf>, scenario: &Scenario) -> PathBuf {
    flag.or_else(|| std::env::var_os("HYDROPIPE_OUT").map(PathBuf::from))
        .unwrap_or_else(|| Path::new("runs").join(&scenario.run.name))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { scenario, seed, out } => {
            let scenario = match Scenario::load(&scenario) {
                Ok(s) => s,
                Err(e) => return fail(e),
            };
            let seed = seed.unwrap_or(scenario.run.seed);
            let out = output_dir(out, &scenario);
            if let Err(e) = sim::run(&scenario, seed, &out) {
                return fail(e);
            }
            match report::write(&out) {
                Ok(r) => {
                    print!("{}", r.render());
                    verdict(&r)
                }
                Err(e) => fail(e),
            }
        }
        Command::Report { run_dir } => match report::write(&run_dir) {
            Ok(r) => {
                print!("{}", r.render());
                verdict(&r)
            }
            Err(e) => fail(e),
        },
        Command::Calibrate { pairs_file } => {
            let curve = fs::read_to_string(&pairs_file)
                .map_err(|e| format!("{}: {e}", pairs_file.display()))
                .and_then(|text| {
                    parse_calibration_pairs(&text)
                        .and_then(|p| fit_from_pairs(&p))
                        .map_err(|e| e.to_string())
                });
            match curve {
                Ok(c) => {
                    println!("{c}");
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Tables => {
            print!("{}", report::reference_tables());
            ExitCode::SUCCESS
        }
    }
}
