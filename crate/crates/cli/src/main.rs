use std::path::PathBuf;
use std::process::ExitCode;

use bodycal::solver::ConstraintMode;
use bodycal_cli::config::ExperimentConfig;
use bodycal_cli::experiment;
use bodycal_cli::CliError;
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "bodycal", version, about = "IMU-to-segment calibration experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Hard,
    Soft,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Experiment configuration JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads for sweeps and ablations.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Seed for simulated sensor noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Treatment of the connected-segment equations.
    #[arg(long, value_enum)]
    mode: Option<Mode>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate ground truth and IMU streams for the two-segment study.
    Simulate(Common),
    /// Run the estimator over one stream.
    Calibrate(Common),
    /// Run the estimator over an offset grid.
    Sweep(Common),
    /// Compare term masks on one offset test.
    Ablate(Common),
}

fn load(c: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.simulation.seed = seed;
    }
    if let Some(mode) = c.mode {
        cfg.estimator.solver.mode = match mode {
            Mode::Hard => ConstraintMode::Hard,
            Mode::Soft => ConstraintMode::Soft,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(c) => {
            let s = experiment::cmd_simulate(&load(&c)?, &c.out)?;
            println!("wrote {} steps for {} IMUs to {}", s.num_steps, s.num_imus, c.out.display());
        }
        Command::Calibrate(c) => {
            let r = experiment::cmd_calibrate(&load(&c)?, &c.out)?;
            match r.detection_step {
                Some(step) => println!("convergence detected at step {step}"),
                None => println!("no convergence detected"),
            }
            if let Some(errs) = r.mean_errors_deg() {
                for (i, e) in errs.iter().enumerate() {
                    println!("IMU {i}: mean q^SI error {e:.3} deg after step {}", r.errors_from);
                }
            }
        }
        Command::Sweep(c) => {
            let (_, s) = experiment::cmd_sweep(&load(&c)?, &c.out, c.jobs)?;
            println!(
                "{} tests: TP {} TN {} FP {} FN {} failed {}",
                s.tests, s.true_positive, s.true_negative, s.false_positive, s.false_negative, s.failed
            );
        }
        Command::Ablate(c) => {
            for r in experiment::cmd_ablate(&load(&c)?, &c.out, c.jobs)? {
                let errs: Vec<String> = r.final_error_deg.iter().map(|e| format!("{e:.3}")).collect();
                println!("{:<8} detected {:<6} final error [{}] deg", r.mask, r.detection_step.map_or("-".into(), |s| s.to_string()), errs.join(", "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
