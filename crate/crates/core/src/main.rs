use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedtrinet::experiment::{emit_summary, run_experiment, sweep_phase_rounds, sweep_table, ExperimentConfig};
use fedtrinet::nn::{gradient_check, NetworkArchitecture};
use fedtrinet::{Error, Result};

/// Tolerance for the `gradcheck` subcommand.
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "fedtrinet", version, about = "Federated semi-supervised learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment described by a config file.
    Run { config: PathBuf },
    /// Run one experiment per phase-round combination.
    Sweep {
        config: PathBuf,
        /// Comma-separated `T1:T2` pairs, e.g. `30:70,40:60`.
        #[arg(long)]
        combos: String,
    },
    /// Summarize a metrics CSV.
    Report { metrics: PathBuf },
    /// Compare analytic and finite-difference gradients on the tiny network.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_combos(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(|pair| {
            let (a, b) = pair
                .trim()
                .split_once(':')
                .ok_or_else(|| Error::Config {
                    key: "combos".into(),
                    message: format!("expected T1:T2, got {pair:?}"),
                })?;
            let num = |v: &str| {
                v.trim().parse::<usize>().map_err(|_| Error::Config {
                    key: "combos".into(),
                    message: format!("not a round count: {v:?}"),
                })
            };
            Ok((num(a)?, num(b)?))
        })
        .collect()
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(path).map_err(|e| match e {
        // an unreadable config file is a configuration problem
        Error::Io(io) => Error::Config {
            key: path.display().to_string(),
            message: io.to_string(),
        },
        other => other,
    })?;
    cfg.apply_env_overrides()?;
    Ok(cfg)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run { config } => {
            let cfg = load_config(&config)?;
            let s = run_experiment(&cfg)?.summary;
            println!("experiment: {}", s.experiment_id);
            println!("mode: {}", s.mode.as_str());
            println!("final accuracy: {:.4}", s.final_accuracy);
            println!("best accuracy: {:.4}", s.best_accuracy);
            println!("pseudo labels used: {}", s.pseudo_labels_used);
            println!("metrics: {}", s.metrics_path.display());
            println!("checkpoint: {}", s.checkpoint_path.display());
        }
        Command::Sweep { config, combos } => {
            let cfg = load_config(&config)?;
            let combos = parse_combos(&combos)?;
            print!("{}", sweep_table(&sweep_phase_rounds(&cfg, &combos)?));
        }
        Command::Report { metrics } => print!("{}", emit_summary(&metrics)?),
        Command::Gradcheck { seed } => {
            let arch = NetworkArchitecture::tiny();
            let err = gradient_check(&arch, seed)?;
            println!(
                "max relative error {err:.3e} over {} parameters (tolerance {GRADCHECK_TOLERANCE:e})",
                arch.num_parameters()
            );
            if err >= GRADCHECK_TOLERANCE {
                return Err(Error::GradientCheck {
                    error: err,
                    tolerance: GRADCHECK_TOLERANCE,
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 1 } else { 2 })
        }
    }
}
