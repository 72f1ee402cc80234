use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use imp_cli::{cmd_eval, cmd_gen_data, cmd_inspect_cache, cmd_plot, cmd_train, data_dir, error_line, load_config, Overrides};
use imp_core::agd::TrainMode;

#[derive(Parser)]
#[command(name = "imp", version, about = "Multimodal MoE training with alternating gradient descent")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TrainMode>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write train and eval shards for every configured dataset.
    GenData(Common),
    /// Train, optionally resuming from a checkpoint directory.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a checkpoint on a configured suite.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        suite: String,
    },
    /// Audit plan builds in a run's metrics stream.
    InspectCache(Common),
    /// Write loss and learning-rate curves for a run.
    Plot(Common),
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    s.parse().map_err(|e: imp_core::CoreError| e.to_string())
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            mode: self.mode,
            steps: self.steps,
            out: self.out.clone(),
        }
    }

    fn config(&self) -> Result<imp_core::run::RunConfig> {
        let path = self.config.as_ref().context("--config is required for this command")?;
        load_config(path, &self.overrides())
    }

    /// Run directory: `--out`, else the config's `out`.
    fn run_dir(&self) -> Result<PathBuf> {
        match (&self.out, &self.config) {
            (Some(out), _) => Ok(out.clone()),
            (None, Some(_)) => Ok(self.config()?.out),
            (None, None) => anyhow::bail!("pass --out DIR or --config PATH"),
        }
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let mut cfg = common.config()?;
            if let Some(seed) = common.seed {
                cfg.synth.seed = seed;
            }
            let dir = match &common.out {
                Some(out) => out.clone(),
                None => data_dir(&cfg),
            };
            print_json(&cmd_gen_data(&cfg, &dir)?)
        }
        Command::Train { common, checkpoint } => {
            let cfg = common.config()?;
            let summary = cmd_train(&cfg, checkpoint.as_deref(), |line| eprintln!("{line}"))?;
            print_json(&summary)
        }
        Command::Eval {
            common,
            checkpoint,
            suite,
        } => {
            let cfg = common.config()?;
            let report = cmd_eval(&cfg, &checkpoint, &suite)?;
            let path = cfg.out.join(format!("eval-{suite}.json"));
            std::fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
            std::fs::write(&path, serde_json::to_vec_pretty(&report)?)
                .with_context(|| format!("writing {}", path.display()))?;
            print_json(&report)
        }
        Command::InspectCache(common) => {
            let summary = cmd_inspect_cache(&common.run_dir()?)?;
            print_json(&summary)?;
            if !summary.is_healthy() {
                anyhow::bail!("{} plan-cache violation(s)", summary.violations.len());
            }
            Ok(())
        }
        Command::Plot(common) => print_json(&cmd_plot(&common.run_dir()?)?),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_line(&err));
            ExitCode::FAILURE
        }
    }
}
