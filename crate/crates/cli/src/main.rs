//! `cmi`: conditional mean independence tests from the command line.
//!
//! Exit codes: 0 success, 2 input or configuration error, 3 numerical
//! failure (or a replay that did not reproduce its records).

mod commands;
mod error;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cmi_core::harness::{StatisticVariant, StudySpec};
use cmi_core::simdata::{Example, Scenario};
use cmi_core::{KernelFamily, TestConfig};

use crate::error::{CliError, CliResult};
use crate::manifest::DataPaths;

/// Environment variable holding the worker-thread budget.
const THREADS_ENV: &str = "CMI_THREADS";

#[derive(Parser)]
#[command(name = "cmi", version, about = "Conditional mean independence tests with generative neural networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Test E[Y | X, Z] = E[Y | Z] on CSV data.
    Test(TestArgs),
    /// Monte-Carlo size and power studies on the simulation designs.
    Simulate(SimulateArgs),
    /// Merge study files into a summary table and plot data.
    Report(ReportArgs),
    /// Export a simulated dataset as CSV.
    Generate(GenerateArgs),
    /// Repeat a recorded run and check its records.
    Replay(ReplayArgs),
}

/// Settings shared by `test` and `simulate`; flags override the config file.
#[derive(Args)]
struct TestFlags {
    /// TOML file with test settings (kernel, bandwidth, training, ...).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    level: Option<f64>,
    /// Bootstrap replicates B.
    #[arg(long)]
    bootstrap: Option<usize>,
    /// Monte Carlo draws M per observation.
    #[arg(long = "mc-samples")]
    mc_samples: Option<usize>,
    #[arg(long, value_parser = parse_kernel)]
    kernel: Option<KernelFamily>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TestFlags {
    fn resolve(&self) -> CliResult<TestConfig> {
        let mut cfg = commands::load_config(self.config.as_deref())?;
        if let Some(v) = self.level {
            cfg.level = v;
        }
        if let Some(v) = self.bootstrap {
            cfg.bootstrap.replicates = v;
        }
        if let Some(v) = self.mc_samples {
            cfg.mc_samples = v;
        }
        if let Some(v) = self.kernel {
            cfg.kernel = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TestArgs {
    #[arg(long)]
    x: PathBuf,
    #[arg(long)]
    y: PathBuf,
    #[arg(long)]
    z: PathBuf,
    #[command(flatten)]
    flags: TestFlags,
    /// Directory for result.json, summary.txt and manifest.json.
    #[arg(long, default_value = "cmi-test")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_parser = parse_example)]
    example: Example,
    #[arg(long, value_parser = parse_scenario)]
    scenario: Scenario,
    /// Sample sizes; a comma-separated list runs one study per size.
    #[arg(long, value_delimiter = ',', required = true)]
    n: Vec<usize>,
    #[arg(long)]
    reps: usize,
    /// estimated, oracle, contaminated or contaminated:<exponent>.
    #[arg(long, default_value = "estimated", value_parser = parse_variant)]
    variant: StatisticVariant,
    #[command(flatten)]
    flags: TestFlags,
    #[arg(long, default_value = "cmi-study")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Study files written by `simulate`.
    #[arg(required = true)]
    studies: Vec<PathBuf>,
    #[arg(long, default_value = "cmi-report")]
    out: PathBuf,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_parser = parse_example)]
    example: Example,
    #[arg(long, value_parser = parse_scenario)]
    scenario: Scenario,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "cmi-data")]
    out: PathBuf,
}

#[derive(Args)]
struct ReplayArgs {
    manifest: PathBuf,
    /// Where to write the repeated run; defaults to the recorded directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_kernel(s: &str) -> Result<KernelFamily, String> {
    s.to_ascii_lowercase().parse().map_err(|e: cmi_core::CmiError| e.to_string())
}

fn parse_example(s: &str) -> Result<Example, String> {
    s.to_ascii_lowercase().parse().map_err(|e: cmi_core::CmiError| e.to_string())
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    s.to_ascii_lowercase().parse().map_err(|e: cmi_core::CmiError| e.to_string())
}

fn parse_variant(s: &str) -> Result<StatisticVariant, String> {
    s.to_ascii_lowercase().parse().map_err(|e: cmi_core::CmiError| e.to_string())
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| CliError::Input(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Input(format!("cannot start {threads} worker threads: {e}")))
}

fn report_manifest(path: &Path) {
    eprintln!("manifest written to {}", path.display());
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Test(a) => {
            let cfg = a.flags.resolve()?;
            let data = DataPaths { x: a.x, y: a.y, z: a.z };
            report_manifest(&commands::run_test(data, cfg, &a.out)?);
        }
        Command::Simulate(a) => {
            let test = a.flags.resolve()?;
            let studies = a
                .n
                .iter()
                .map(|&n| StudySpec {
                    example: a.example,
                    scenario: a.scenario,
                    n,
                    replications: a.reps,
                    level: test.level,
                    variant: a.variant,
                    seed: test.seed,
                    test: test.clone(),
                })
                .collect();
            report_manifest(&commands::run_simulate(studies, &a.out)?);
        }
        Command::Report(a) => report_manifest(&commands::run_report(a.studies, &a.out)?),
        Command::Generate(a) => {
            report_manifest(&commands::run_generate(a.example, a.scenario, a.n, a.seed, &a.out)?);
        }
        Command::Replay(a) => {
            let (command, count) = commands::replay(&a.manifest, a.out.as_deref())?;
            println!("replayed `{command}`: all {count} recorded files reproduced");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
