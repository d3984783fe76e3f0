use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lrgrad_cli::{prepare, run_ablate, run_evaluate, run_train, CliError, ExperimentConfig, RunOptions};

#[derive(Parser)]
#[command(name = "lrgrad", version, about = "Train and probe networks with likelihood-ratio gradients")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the configured model and evaluate the configured attacks.
    Train(Common),
    /// Evaluate a trained model (model.json in the output directory).
    Evaluate(Common),
    /// Compare LR gradient estimates with backpropagation over a grid.
    Ablate(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Omit timing columns so reruns produce byte-identical files.
    #[arg(long)]
    deterministic: bool,
    /// Overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (Command::Train(c) | Command::Evaluate(c) | Command::Ablate(c)) = &cli.command;
    if let Some(n) = c.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("--threads: {e}")))?;
    }
    let opts = RunOptions {
        seed: c.seed,
        out: c.out.clone(),
        deterministic: c.deterministic,
    };
    let prepared = prepare(ExperimentConfig::load(&c.config)?, &opts)?;
    match cli.command {
        Command::Train(_) => {
            let history = run_train(&prepared)?;
            if let Some(last) = history.last() {
                eprintln!(
                    "trained {} epochs: loss {:.4}, test accuracy {:.4}",
                    last.epoch, last.train_loss, last.test_accuracy
                );
            }
        }
        Command::Evaluate(_) => {
            for row in run_evaluate(&prepared)?.rows {
                eprintln!("{}: {}", row[0], row[1]);
            }
        }
        Command::Ablate(_) => {
            let rows = run_ablate(&prepared)?.rows.len();
            eprintln!("wrote {rows} similarity rows");
        }
    }
    eprintln!("outputs in {}", prepared.out.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
