//! Experiment driver for gradient-informed fine-tuning: configuration,
//! artifacts and the `train`, `gift`, `eval`, `sweep` and `check` commands.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod stats;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{ConfigSource, ExperimentConfig};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "gift", version, about = "Train noisy networks in silico and fine-tune them against a noisy forward-only device")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every experiment command.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Built-in preset: mnist, blobs, linear or smoke (default mnist).
    #[arg(long)]
    pub preset: Option<String>,
    /// Experiment configuration as a JSON document.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Override one field, e.g. `--set train.s0=0.2` (repeatable).
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
    /// Comma-separated seeds replacing the configured list.
    #[arg(long)]
    pub seeds: Option<String>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// MNIST directory (otherwise the config, then $GIFT_DATA_DIR, then data/mnist).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> CliResult<ExperimentConfig> {
        ConfigSource {
            preset: self.preset.clone(),
            config_path: self.config.clone(),
            overrides: self.overrides.clone(),
            seeds: self.seeds.clone(),
            out: self.out.clone(),
            data_dir: self.data_dir.clone(),
        }
        .resolve()
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one network per seed and write checkpoints and loss curves.
    Train(ConfigArgs),
    /// Fine-tune trained weights against the configured device.
    Gift {
        #[command(flatten)]
        config: ConfigArgs,
        /// Start from this checkpoint instead of training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score trained weights on the configured device.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the configured grid and write per-seed and aggregate tables.
    Sweep(ConfigArgs),
    /// Run the numerical self-checks and write check.json.
    Check {
        #[arg(long, default_value = "out/check")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Print the resolved configuration.
    ShowConfig(ConfigArgs),
}

/// Runs one parsed command, printing a short summary to stdout.
pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(args) => {
            let cfg = args.resolve()?;
            for r in commands::cmd_train(&cfg)? {
                println!(
                    "{} s0={} seed={}: {} steps, smoothed loss {:.4} -> {:.4}, {}",
                    r.arch,
                    r.s0,
                    r.seed,
                    r.steps,
                    r.first_smoothed_loss,
                    r.final_smoothed_loss,
                    r.checkpoint.display()
                );
            }
        }
        Command::Gift { config, checkpoint } => {
            let cfg = config.resolve()?;
            for r in commands::cmd_gift(&cfg, checkpoint.as_deref())? {
                println!(
                    "{} s0={} s_t={} seed={}: loss {:.5} -> {:.5} in {} steps",
                    r.arch,
                    r.s0,
                    r.s_t,
                    r.seed,
                    r.baseline_loss.unwrap_or(f64::NAN),
                    r.gift_loss.unwrap_or(f64::NAN),
                    r.steps.unwrap_or(f64::NAN)
                );
            }
        }
        Command::Eval { config, checkpoint } => {
            let cfg = config.resolve()?;
            for r in commands::cmd_eval(&cfg, checkpoint.as_deref())? {
                let acc = r.report.accuracy.map_or_else(String::new, |a| format!(", accuracy {a:.4}"));
                println!("seed={} {}: loss {:.5} +- {:.5}{acc}", r.seed, r.split, r.report.loss, r.report.loss_se);
            }
        }
        Command::Sweep(args) => {
            let cfg = args.resolve()?;
            let res = commands::cmd_sweep(&cfg)?;
            let failed = res.rows.iter().filter(|r| !r.is_ok()).count();
            println!(
                "{} rows ({} failed), {} cells, written to {}",
                res.rows.len(),
                failed,
                res.aggregate.len(),
                cfg.output_dir.display()
            );
        }
        Command::Check { out, seed } => {
            let result = commands::run_checks(&out, seed)?;
            for c in &result {
                println!("{} {} ({:.2} s)", if c.passed { "PASS" } else { "FAIL" }, c.name, c.seconds);
            }
            let failed = result.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(CliError::CheckFailed { failed });
            }
        }
        Command::ShowConfig(args) => {
            let cfg = args.resolve()?;
            println!("{}", serde_json::to_string_pretty(&cfg)?);
        }
    }
    Ok(())
}
