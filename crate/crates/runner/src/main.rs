use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kgd_runner::output::{dump_spectral, write_outputs};
use kgd_runner::{run_experiment, ExperimentConfig, ExperimentKind, RunnerError};

#[derive(Parser)]
#[command(name = "kgd", version, about = "Kernel gradient descent stopping-rule experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Constant sweep of the backward rule plus bias/variance curves.
    Sim1(RunArgs),
    /// Comparison of stopping rules.
    Sim2(RunArgs),
    /// Covariate shift: hold-out against the hybrid rule.
    Sim3(RunArgs),
    /// Geomagnetic data from local CSV files.
    Realdata(RunArgs),
    /// Spectral tables and gradient-descent traces as CSV.
    DumpSpectral(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the worker count.
    #[arg(long)]
    workers: Option<usize>,
}

fn load(args: &RunArgs, kind: Option<ExperimentKind>) -> Result<ExperimentConfig, RunnerError> {
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(kind) = kind {
        match config.experiment {
            Some(k) if k != kind => {
                return Err(RunnerError::Config(vec![format!(
                    "experiment: config declares {k:?} but the subcommand runs {kind:?}"
                )]))
            }
            _ => config.experiment = Some(kind),
        }
    }
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if args.workers.is_some() {
        config.workers = args.workers;
    }
    config.validate()?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), RunnerError> {
    let (args, kind) = match &cli.command {
        Command::Sim1(a) => (a, Some(ExperimentKind::Sim1ConstantSweep)),
        Command::Sim2(a) => (a, Some(ExperimentKind::Sim2MethodComparison)),
        Command::Sim3(a) => (a, Some(ExperimentKind::Sim3CovariateShift)),
        Command::Realdata(a) => (a, Some(ExperimentKind::Realdata)),
        Command::DumpSpectral(a) => (a, None),
    };
    let config = load(args, kind)?;
    let written = if kind.is_some() {
        let out = run_experiment(&config)?;
        write_outputs(&args.out, &out)?
    } else {
        dump_spectral(&args.out, &config)?
    };
    for path in written {
        println!("{}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
