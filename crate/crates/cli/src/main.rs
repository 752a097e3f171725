use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cbct_autofocus_cli::{Config, Run};

#[derive(Parser)]
#[command(name = "cbct-autofocus", version, about = "Rigid motion simulation and compensation for circular cone-beam CT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Paths {
    /// Experiment config (JSON).
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate motion-free and motion-corrupted acquisitions.
    Simulate(Paths),
    /// Train the reprojection-error regressor.
    Train(Paths),
    /// Estimate the motion and reconstruct with every configured method.
    Compensate(Paths),
    /// Metrics table and slice images.
    Evaluate(Paths),
    /// simulate, train, compensate, evaluate.
    All(Paths),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (paths, step): (&Paths, fn(&Run) -> cbct_autofocus::Result<()>) = match &cli.command {
        Command::Simulate(p) => (p, Run::simulate),
        Command::Train(p) => (p, Run::train),
        Command::Compensate(p) => (p, Run::compensate),
        Command::Evaluate(p) => (p, Run::evaluate),
        Command::All(p) => (p, Run::all),
    };
    let result = Config::load(&paths.config).and_then(|cfg| Run::new(cfg, &paths.out)).and_then(|run| step(&run));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 3 })
        }
    }
}
