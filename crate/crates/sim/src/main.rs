use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use irs_sim::experiments::{self, file_digest, prepare_output, Run};
use irs_sim::{ExperimentSpec, Profile, Result};

/// IRS-assisted downlink experiments.
///
/// Exit status: 0 on success, 2 for configuration errors, 3 for numerical
/// failures, 1 for I/O errors.
#[derive(Debug, Parser)]
#[command(name = "irs-sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Spec file layered over the profile.
    #[arg(long, global = true)]
    spec: Option<PathBuf>,
    /// Overrides the seed of the spec.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Base directory for results.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Worker threads for Monte-Carlo evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[arg(long, global = true, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    /// Overwrite an existing result directory.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the policy network.
    Train,
    /// Evaluate every configured method at the spec's point.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate every configured method along the sweep axis.
    Sweep {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Empirical CDF of the minimum user rate.
    Cdf {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Array responses of a policy's output for one realization.
    ArrayResponse {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fit and store LMMSE statistics.
    FitLmmse,
    /// Perfect-CSI optimization and random phases.
    Baseline,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Sweep { .. } => "sweep",
            Command::Cdf { .. } => "cdf",
            Command::ArrayResponse { .. } => "array-response",
            Command::FitLmmse => "fit-lmmse",
            Command::Baseline => "baseline",
        }
    }

    fn checkpoint(&self) -> Option<&Path> {
        match self {
            Command::Eval { checkpoint }
            | Command::Sweep { checkpoint }
            | Command::Cdf { checkpoint }
            | Command::ArrayResponse { checkpoint } => checkpoint.as_deref(),
            Command::Train | Command::FitLmmse | Command::Baseline => None,
        }
    }
}

fn execute(cli: &Cli) -> Result<PathBuf> {
    let mut spec = match &cli.spec {
        Some(path) => ExperimentSpec::load(cli.profile, path)?,
        None => ExperimentSpec::profile(cli.profile),
    };
    if let Some(seed) = cli.seed {
        spec.seed = seed;
    }
    if cli.workers == 0 {
        return Err(irs_sim::SimError::config("--workers must be at least 1"));
    }
    let checkpoint = cli.command.checkpoint();
    let extra = match checkpoint {
        Some(p) => file_digest(p)?,
        None => 0,
    };
    let dir = prepare_output(&cli.out, cli.command.name(), &spec, extra, cli.force)?;
    let run = Run::new(spec, dir.clone(), cli.out.join("cache"), cli.workers)?;
    match &cli.command {
        Command::Train => {
            experiments::cmd_train(&run)?;
        }
        Command::Eval { .. } => {
            experiments::cmd_eval(&run, checkpoint)?;
        }
        Command::Sweep { .. } => {
            experiments::cmd_sweep(&run, checkpoint)?;
        }
        Command::Cdf { .. } => {
            experiments::cmd_cdf(&run, checkpoint)?;
        }
        Command::ArrayResponse { .. } => {
            experiments::cmd_array_response(&run, checkpoint)?;
        }
        Command::FitLmmse => {
            experiments::cmd_fit_lmmse(&run)?;
        }
        Command::Baseline => {
            experiments::cmd_baseline(&run)?;
        }
    }
    Ok(dir)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
