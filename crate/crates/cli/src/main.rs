//! `reglab`: config-driven experiment commands.
//!
//! Exit codes: 0 success, 1 config validation error, 2 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use reglab::config::ExperimentConfig;
use reglab::runner;

#[derive(Parser)]
#[command(
    name = "reglab",
    about = "Register-mechanism workbench: synthetic cross-domain few-shot experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for datasets, runs, and reports.
    #[arg(long)]
    out: PathBuf,
    /// Run only this seed instead of the config's seed list.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the source + target dataset suite.
    GenData(Common),
    /// Train one checkpoint per seed on the source domain.
    Train(Common),
    /// Episodic evaluation of trained checkpoints on the target domains.
    Eval(Common),
    /// Sharpness, CKA, and heatmap reports for trained checkpoints.
    Analyze(Common),
}

fn load_config(common: &Common) -> Result<ExperimentConfig, runner::RunnerError> {
    Ok(ExperimentConfig::from_file(&common.config)?)
}

fn run(cli: Cli) -> Result<(), runner::RunnerError> {
    match &cli.command {
        Command::GenData(c) => {
            let files = runner::cmd_gen_data(&load_config(c)?, &c.out)?;
            for f in files {
                println!("wrote {}", f.display());
            }
        }
        Command::Train(c) => {
            let outs = runner::cmd_train(&load_config(c)?, &c.out, c.seed_override)?;
            for o in outs {
                let last = o.stats.last().expect("at least one epoch");
                println!(
                    "seed {}: final loss {:.4}, train accuracy {:.3} -> {}",
                    o.seed,
                    last.mean_loss,
                    last.accuracy,
                    o.dir.display()
                );
            }
        }
        Command::Eval(c) => {
            let outs = runner::cmd_eval(&load_config(c)?, &c.out, c.seed_override)?;
            for o in outs {
                for (domain, mode, result) in &o.results {
                    println!(
                        "seed {} {domain} [{mode}]: {:.4} +- {:.4}",
                        o.seed, result.mean, result.ci95
                    );
                }
            }
        }
        Command::Analyze(c) => {
            let outs = runner::cmd_analyze(&load_config(c)?, &c.out, c.seed_override)?;
            for o in outs {
                println!("seed {}: {} report files in {}", o.seed, o.files.len(), o.dir.display());
            }
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
