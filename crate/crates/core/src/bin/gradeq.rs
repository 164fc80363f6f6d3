use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gradeq::harness::{run_path, Stage};
use gradeq::Error;

/// Input gradient distillation experiments: training, inequality metrics and
/// attack evaluation.
#[derive(Parser)]
#[command(name = "gradeq", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every entry (cached checkpoints are reused)
    Train(Common),
    /// Accuracy, PGD accuracy, Gini, L1 and confidence tables
    Evaluate(Common),
    /// Noise and occlusion error-rate curves
    Attack(Common),
    /// Global and regional Gini of models and exported maps
    Gini(Common),
    /// Masked-weight statistics of linearized models
    Theory(Common),
    /// Gaussian, shot and impulse corruption error rates
    Corrupt(Common),
    /// Every stage the config enables, plus charts
    Report(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, args) = match cli.command {
        Command::Train(a) => (Stage::Train, a),
        Command::Evaluate(a) => (Stage::Evaluate, a),
        Command::Attack(a) => (Stage::Attack, a),
        Command::Gini(a) => (Stage::Gini, a),
        Command::Theory(a) => (Stage::Theory, a),
        Command::Corrupt(a) => (Stage::Corrupt, a),
        Command::Report(a) => (Stage::Report, a),
    };
    match run_path(&args.config, stage, args.seed, args.out) {
        Ok(bundle) => {
            println!("{} config {} seed {}: done", stage.name(), bundle.config_hash, bundle.seed);
            ExitCode::SUCCESS
        }
        Err(e @ Error::Stage { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
