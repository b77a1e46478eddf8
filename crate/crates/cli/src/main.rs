mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Kinematics-aware diffusion policies: demonstrations, training,
/// evaluation and solver benchmarks.
#[derive(Debug, Parser)]
#[command(name = "kadp", version)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Config file; a file named after a section (policy.toml, ...) holds
    /// only that section. Repeatable, applied in order.
    #[arg(long = "config", global = true, value_name = "FILE")]
    pub configs: Vec<PathBuf>,
    /// Override one key, e.g. `--set denoiser.epochs=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Parent of all run directories.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Run directory name; derived from the command and its inputs when
    /// absent.
    #[arg(long, global = true)]
    pub run_id: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record scripted demonstrations.
    GenDemos {
        /// Number of demonstrations (demos.count).
        #[arg(long)]
        count: Option<usize>,
    },
    /// Pretrain the node-to-joint network.
    TrainIk {
        /// Draw training configurations around this dataset's joint range.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train a denoiser on a dataset.
    TrainPolicy {
        #[arg(long)]
        dataset: PathBuf,
        /// Pretrained IK network for constrained node training.
        #[arg(long)]
        ik_mlp: Option<PathBuf>,
        /// Train without kinematic constraints (policy.constrained = false).
        #[arg(long)]
        no_kc: bool,
        /// node, joint or ee (policy.representation).
        #[arg(long)]
        representation: Option<String>,
        /// Continue from the run's saved training state.
        #[arg(long)]
        resume: bool,
        /// Stop after this many epochs in this invocation.
        #[arg(long, hide = true)]
        stop_after_epochs: Option<usize>,
    },
    /// Evaluate checkpoints on the configured task.
    Eval {
        /// `[label=]path` of a denoiser checkpoint. Repeatable.
        #[arg(long = "checkpoint", value_name = "[LABEL=]PATH")]
        checkpoints: Vec<String>,
        /// Replay a dataset's demonstrations as an upper bound.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
    /// Time the IK solver on random feasible targets.
    IkBench {
        /// Number of targets (bench.targets).
        #[arg(long)]
        targets: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let text = e.to_string();
            let text = text.strip_prefix("error: ").unwrap_or(&text);
            eprintln!("error[usage]: {}", text.trim_end());
            return ExitCode::from(2);
        }
        Err(e) => e.exit(),
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
