//! `ocs`: run OCS learning-dynamics experiments from presets or config files.

mod config;
mod pipeline;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};

use crate::config::{ExperimentConfig, PRESETS};
use crate::pipeline::{print_report, resolve_out, run_experiment, Stages};
use crate::verify::{Suite, VerifyOptions};

#[derive(Parser)]
#[command(
    name = "ocs",
    version,
    about = "Learning dynamics of linear networks toward the optimal constant solution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the dataset of every condition.
    Generate(Source),
    /// Write singular values, input eigenvalues and OCS alignment.
    Spectrum(Source),
    /// Train every condition and write its trajectory.
    Simulate(Source),
    /// Write closed-form mode and loss curves without training.
    Analytic(Source),
    /// Train and write simulated curves next to the closed form.
    Compare(Source),
    /// Compare the kernel at initialization with its closed form.
    Ntk(Source),
    /// Train and write OCS distance, TNR/TPR and timing metrics.
    Metrics(Source),
    /// Train and write expected TNR of the discretized response.
    Discretize(Source),
    /// Run every stage the config enables.
    Run(Source),
    /// Check library invariants and print one verdict per check.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
        /// Step size for the dynamics trajectory check.
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// List the built-in presets.
    Presets,
}

#[derive(Args)]
struct Source {
    /// Experiment config file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset name.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory; defaults to runs/<name>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl Source {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), None) => ExperimentConfig::load(path)?,
            (None, Some(name)) => ExperimentConfig::preset(name)?,
            _ => bail!("pass exactly one of --config and --preset"),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        resolve_out(&mut cfg, self.out.clone());
        Ok(cfg)
    }
}

fn stages(command: &Command, cfg: &ExperimentConfig) -> Stages {
    let none = Stages::default();
    match command {
        Command::Generate(_) => Stages {
            dataset_files: true,
            ..none
        },
        Command::Spectrum(_) => Stages {
            spectrum: true,
            ..none
        },
        Command::Simulate(_) => Stages {
            simulate: true,
            ..none
        },
        Command::Analytic(_) => Stages {
            analytic: true,
            ..none
        },
        Command::Compare(_) => Stages {
            simulate: true,
            analytic: true,
            compare: true,
            ..none
        },
        Command::Ntk(_) => Stages { ntk: true, ..none },
        Command::Metrics(_) => Stages {
            metrics: true,
            ..none
        },
        Command::Discretize(_) => Stages {
            discretize: true,
            ..none
        },
        Command::Run(_) => Stages::full(cfg),
        Command::Verify { .. } | Command::Presets => none,
    }
}

fn execute(cli: Cli) -> Result<bool> {
    let source = match &cli.command {
        Command::Verify {
            suite,
            learning_rate,
            seed,
        } => {
            let verdicts = verify::run(
                *suite,
                VerifyOptions {
                    learning_rate: *learning_rate,
                    seed: *seed,
                },
            );
            verify::print(&verdicts, std::io::stdout().lock())?;
            return Ok(verdicts.iter().all(|v| v.pass));
        }
        Command::Presets => {
            for (name, _) in PRESETS {
                println!("{name}");
            }
            return Ok(true);
        }
        Command::Generate(s)
        | Command::Spectrum(s)
        | Command::Simulate(s)
        | Command::Analytic(s)
        | Command::Compare(s)
        | Command::Ntk(s)
        | Command::Metrics(s)
        | Command::Discretize(s)
        | Command::Run(s) => s,
    };
    let cfg = source.load()?;
    let report = run_experiment(&cfg, stages(&cli.command, &cfg))?;
    print_report(&report, std::io::stdout().lock())?;
    println!("outputs in {}", cfg.out_dir().display());
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
