use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use mtorl_cli::{cmd_allocate, cmd_evaluate, cmd_gen_data, cmd_simulate, cmd_train, PolicyKind, RunConfig};

#[derive(Parser)]
#[command(
    name = "mtorl",
    version,
    about = "Multi-task offline RL for multi-channel advertising"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set training.lr=0`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

impl Common {
    fn load(&self, extra: &[String]) -> Result<RunConfig> {
        let all: Vec<String> = self.overrides.iter().chain(extra).cloned().collect();
        RunConfig::load(self.config.as_deref(), &all, self.seed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic journey log from the configured environment.
    GenData(Common),
    /// Train a model and evaluate it on the test split.
    Train(Common),
    /// Evaluate a checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the budgeted advertising procedure in the synthetic environment.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "model")]
        policy: PolicyKind,
        /// Total budget; overrides procedure.budget.
        #[arg(long)]
        budget: Option<f64>,
    },
    /// Channel policies and user ranking from a journey log.
    Allocate {
        #[command(flatten)]
        common: Common,
        /// Reward predictions (JSON lines with user_id, channel, pred).
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
    },
}

fn init_logging() {
    let level = std::env::var("MTORL_LOG_LEVEL").unwrap_or_else(|_| "warn".into());
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .init();
}

fn main() -> Result<()> {
    init_logging();
    match Cli::parse().command {
        Command::GenData(c) => {
            let paths = cmd_gen_data(&c.load(&[])?, &c.out)?;
            println!("{}", paths.journeys.display());
        }
        Command::Train(c) => {
            let out = cmd_train(&c.load(&[])?, &c.out)?;
            println!(
                "{} epochs, test F1 {:.4}, checkpoint {}",
                out.history.len(),
                out.report.f1,
                out.checkpoint.display()
            );
        }
        Command::Evaluate { common, checkpoint } => {
            let report = cmd_evaluate(&common.load(&[])?, &checkpoint, &common.out)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Simulate {
            common,
            checkpoint,
            policy,
            budget,
        } => {
            let extra: Vec<String> = budget
                .map(|b| format!("procedure.budget={b}"))
                .into_iter()
                .collect();
            let report = cmd_simulate(&common.load(&extra)?, checkpoint.as_deref(), policy, &common.out)?;
            println!(
                "{}: penalized reward {:.4} (gain {}, cost {:.4}, {} exploitation exposures)",
                report.policy,
                report.cumulative_penalized_reward,
                report.cumulative_gain,
                report.cumulative_cost,
                report.exploitation_exposures
            );
        }
        Command::Allocate {
            common,
            predictions,
            tau,
            alpha,
        } => {
            let mut extra = Vec::new();
            if let Some(p) = predictions {
                extra.push(format!("data.predictions={}", serde_json::to_string(&p)?));
            }
            extra.extend(tau.map(|t| format!("allocation.tau={t}")));
            extra.extend(alpha.map(|a| format!("allocation.alpha={a}")));
            let report = cmd_allocate(&common.load(&extra)?, &common.out)?;
            println!("{}", serde_json::to_string_pretty(&report.merged)?);
        }
    }
    Ok(())
}
