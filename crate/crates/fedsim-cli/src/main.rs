//! Command-line front end: run experiments, sweep seeds, inspect the
//! per-client outage table, and validate config files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use fedsim::experiment::{
    epsilon_table, run_experiment, run_sweep, write_outputs, ExperimentConfig,
};

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Federated fine-tuning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv plus run.json.
    Run {
        /// Path to a JSON config file.
        config: PathBuf,
        /// Override a config key by dotted path, e.g. --set train.learning_rate=0.1
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output directory (defaults to the config output_dir, then runs/NAME).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the config across consecutive master seeds and summarize.
    Sweep {
        config: PathBuf,
        /// Number of seeds, starting at the config's master_seed.
        #[arg(long)]
        seeds: u64,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print each client's transient outage probability.
    EpsilonTable {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Check a config file and exit.
    Validate {
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn load(path: &Path, overrides: &[String]) -> anyhow::Result<ExperimentConfig> {
    let cfg = fedsim::experiment::config::load_config_with_overrides(path, overrides)
        .with_context(|| format!("loading {}", path.display()))?;
    cfg.validate().context("validating config")?;
    Ok(cfg)
}

fn output_dir(cfg: &ExperimentConfig, cli_out: Option<PathBuf>, config_path: &Path) -> PathBuf {
    cli_out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| {
            let stem = config_path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "experiment".to_string());
            PathBuf::from("runs").join(stem)
        })
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, set, out } => {
            let cfg = load(&config, &set)?;
            let dir = output_dir(&cfg, out, &config);
            let log = run_experiment(cfg)?;
            write_outputs(&log, &dir)?;
            println!(
                "{}: {} rounds, final test accuracy {:.4}, mean connected {:.2}",
                log.config.strategy.id(),
                log.summary.rounds,
                log.summary.final_test_accuracy,
                log.summary.mean_connected_count,
            );
            println!("wrote {}", dir.join("metrics.csv").display());
        }
        Command::Sweep {
            config,
            seeds,
            set,
            out,
        } => {
            if seeds == 0 {
                bail!("--seeds must be at least 1");
            }
            let cfg = load(&config, &set)?;
            let dir = output_dir(&cfg, out, &config);
            let (logs, summary) = run_sweep(&cfg, seeds)?;
            for log in &logs {
                let seed_dir = dir.join(format!("seed-{}", log.config.master_seed));
                write_outputs(log, &seed_dir)?;
            }
            std::fs::create_dir_all(&dir)?;
            std::fs::write(
                dir.join("sweep.json"),
                serde_json::to_string_pretty(&summary)?,
            )?;
            println!(
                "{}: final test accuracy {:.4} +/- {:.4} over {} seeds",
                cfg.strategy.id(),
                summary.mean_accuracy,
                summary.std_accuracy,
                seeds,
            );
            println!("wrote {}", dir.join("sweep.json").display());
        }
        Command::EpsilonTable { config, set } => {
            let cfg = load(&config, &set)?;
            let rows = epsilon_table(&cfg)?;
            println!("client,standard,distance_km,epsilon,intermittent_lambda");
            for row in rows {
                println!(
                    "{},{:?},{},{},{}",
                    row.client, row.standard, row.distance_km, row.epsilon, row.intermittent_lambda,
                );
            }
        }
        Command::Validate { config, set } => {
            let cfg = load(&config, &set)?;
            cfg.build_links()?;
            println!("{} ok", config.display());
        }
    }
    Ok(())
}
