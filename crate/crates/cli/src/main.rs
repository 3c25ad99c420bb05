use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fedval::pipeline::{run_compare, run_federated, run_prune_retrain, run_release, run_scoring, run_train};
use fedval::{write_outcome, ExperimentConfig, Flags, Overrides, PipelineError};
use fedval_core::valuation::Metric;

#[derive(Parser)]
#[command(name = "fedval", version, about = "Private data valuation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and report accuracy and privacy spend.
    Train(Common),
    /// Train, then score every training sample.
    Score(Common),
    /// Train, score and release scores under Laplace noise.
    Release(Common),
    /// Warm up, remove top-scored samples and retrain.
    PruneRetrain(Common),
    /// Federated training, scoring, release and client rewards.
    Federate(Common),
    /// Compare two score files.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Replaces the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for report.json, timings.json and side files.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Target training ε; replaces any configured noise multiplier.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Metric to release or compare: vog, plis, loss or gradnorm.
    #[arg(long, value_parser = parse_metric)]
    metric: Option<Metric>,
    /// Use the literal VoG formula instead of the per-pixel standard deviation.
    #[arg(long)]
    vog_literal: bool,
    /// Keep raw scores out of everything downstream of the release.
    #[arg(long)]
    released_only: bool,
    /// Report training plus release ε as a combined upper bound.
    #[arg(long)]
    compose_with_training: bool,
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn run(cmd: Command) -> Result<(), PipelineError> {
    let (common, runner): (Common, fn(&ExperimentConfig, Flags) -> Result<_, PipelineError>) = match cmd {
        Command::Train(c) => (c, run_train),
        Command::Score(c) => (c, run_scoring),
        Command::Release(c) => (c, run_release),
        Command::PruneRetrain(c) => (c, run_prune_retrain),
        Command::Federate(c) => (c, run_federated),
        Command::Compare(c) => (c, run_compare),
    };
    let mut cfg = ExperimentConfig::load(&common.config)?;
    cfg.apply(&Overrides {
        seed: common.seed,
        epsilon: common.epsilon,
        metric: common.metric,
        vog_literal: common.vog_literal,
    });
    let flags = Flags {
        released_only: common.released_only,
        compose_with_training: common.compose_with_training,
    };
    let outcome = runner(&cfg, flags)?;
    write_outcome(&outcome, &common.out)?;
    log::info!("wrote {}", common.out.join("report.json").display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
