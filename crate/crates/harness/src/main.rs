use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use lotls_harness::report::{self, SentinelRow};
use lotls_harness::scenario::{ArrivalProcess, HoldTimeModel, ScenarioConfig, TlsMode};
use lotls_harness::sentinel_exp::{sentinel_experiment, SentinelExperiment};
use lotls_harness::sim::run_scenario;

#[derive(Parser)]
#[command(name = "lotls", about = "Run the LoRa TLS tunnel over a simulated network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Real,
    Sim,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProcessArg {
    Poisson,
    Deterministic,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario end to end and write trace.jsonl, summary.json and tableV.txt.
    Run {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
    },
    /// Repeat the admission experiment at one or more arrival rates.
    Sentinel {
        /// Clients per second; repeat the flag for several rows.
        #[arg(long, required = true)]
        rate: Vec<f64>,
        #[arg(long, default_value_t = 20)]
        clients: usize,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_enum, default_value = "poisson")]
        arrivals: ProcessArg,
        /// Also write tableV.txt here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the summary of a previous run.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

fn main() -> anyhow::Result<ExitCode> {
    match Cli::parse().command {
        Command::Run { scenario, seed, out, mode } => {
            let mut config = match &scenario {
                Some(path) => ScenarioConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
                None => ScenarioConfig::default(),
            };
            if let Some(seed) = seed {
                config.seed = seed;
            }
            if let Some(mode) = mode {
                config.mode = match mode {
                    ModeArg::Real => TlsMode::RealTls,
                    ModeArg::Sim => TlsMode::SimulatedTls,
                };
            }
            let hold = config.hold_time;
            let run = run_scenario(config)?;
            report::emit_report(&run, &out, &hold).with_context(|| format!("writing {}", out.display()))?;
            print!("{}", report::render_summary(&run.report));
            Ok(if run.report.all_completed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Sentinel { rate, clients, runs, seed, arrivals, out } => {
            let mut rows = Vec::new();
            let hold = HoldTimeModel::default();
            for r in rate {
                let exp = SentinelExperiment {
                    clients,
                    runs,
                    seed,
                    process: match arrivals {
                        ProcessArg::Poisson => ArrivalProcess::Poisson,
                        ProcessArg::Deterministic => ArrivalProcess::Deterministic,
                    },
                    hold,
                    ..SentinelExperiment::new(r)
                };
                let result = sentinel_experiment(&exp)?;
                rows.push(SentinelRow::from_result(report::rate_label(r), &result));
            }
            let table = report::render_sentinel_table(&rows, &hold, runs);
            print!("{table}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join(report::TABLE_FILE), table)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { input } => {
            let summary = report::read_summary(&input).with_context(|| format!("reading {}", input.display()))?;
            print!("{}", report::render_summary(&summary));
            Ok(if summary.all_completed() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}
