use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gradda::experiment::{run_experiment, run_stage, ExperimentConfig, StageRecord};
use gradda::gradcheck::gradcheck_suite;

/// Learned data assimilation experiments on a synthetic lat-lon system.
#[derive(Parser)]
#[command(name = "gradda", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment configuration (JSON).
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides the configured output directory.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::load(&self.config).with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the truth trajectory.
    NatureRun(ConfigArgs),
    /// Draw conventional and radiance observations from the nature run.
    MakeObs(ConfigArgs),
    /// Pretrain and fine-tune the forecast surrogate.
    TrainForecast(ConfigArgs),
    /// Fit the radiance emulators.
    TrainObsop(ConfigArgs),
    /// Bootstrap the per-stream assimilation models.
    TrainDa(ConfigArgs),
    /// Cycle the cascade over the test period.
    Cycle(ConfigArgs),
    /// Medium-range forecasts from the short-window analyses.
    Forecast(ConfigArgs),
    /// Scores, scorecard and skillful lead.
    Verify(ConfigArgs),
    /// The configured stages in dependency order (all when none are listed).
    Run(ConfigArgs),
    /// Gradient, adjoint and QC checks on randomised small cases.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Randomised cases per check.
        #[arg(long, default_value_t = 20)]
        cases: usize,
        /// Repeats the suite for this many consecutive seeds.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
}

fn report(rec: &StageRecord) {
    println!("{:<15} seed {:<6} config {}  {}", rec.stage, rec.seed, &rec.config_hash[..12], rec.summary);
}

fn stage(args: &ConfigArgs, name: &str) -> Result<bool> {
    let cfg = args.load()?;
    report(&run_stage(&cfg, name)?);
    Ok(true)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::NatureRun(a) => stage(&a, "nature-run"),
        Command::MakeObs(a) => stage(&a, "make-obs"),
        Command::TrainForecast(a) => stage(&a, "train-forecast"),
        Command::TrainObsop(a) => stage(&a, "train-obsop"),
        Command::TrainDa(a) => stage(&a, "train-da"),
        Command::Cycle(a) => stage(&a, "cycle"),
        Command::Forecast(a) => stage(&a, "forecast"),
        Command::Verify(a) => stage(&a, "verify"),
        Command::Run(a) => {
            let cfg = a.load()?;
            let m = run_experiment(&cfg, &cfg.stages, report)?;
            println!("manifest {} ({} stages)", cfg.output_dir.join("manifest.json").display(), m.stages.len());
            Ok(true)
        }
        Command::Gradcheck { seed, cases, seeds } => {
            let mut ok = true;
            for s in seed..seed + seeds {
                let r = gradcheck_suite(s, cases)?;
                println!("seed {s}\n{}", r.table());
                ok &= r.passed();
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
