use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use trajrel::config::load_config;
use trajrel::pipeline;

#[derive(Parser)]
#[command(
    name = "trajrel",
    about = "Trajectory prediction with OOD detection and uncertainty estimation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Path to the JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the master seed (and the dataset seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the artifact root directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Generate,
    /// Phase 1: train encoder and predictor on the prediction NLL.
    Train,
    /// Phase 2: fit the lGMM and train the error regressor on frozen features.
    FitReliability,
    /// Evaluate all metrics on the eval split and write the report.
    Evaluate,
    /// Run the full pipeline.
    All,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> trajrel::Result<()> {
    let config_path = cli
        .config
        .ok_or_else(|| trajrel::Error::Config("--config PATH is required".into()))?;
    let config = load_config(&config_path, cli.seed, cli.out)?;
    let run_dir = config.run_dir();
    match cli.command {
        Command::Generate => {
            let s = pipeline::cmd_generate(&config)?;
            println!(
                "wrote {} ({} train / {} dev [{} OOD] / {} eval [{} OOD])",
                s.path.display(),
                s.n_train,
                s.n_dev,
                s.dev_ood,
                s.n_eval,
                s.eval_ood
            );
        }
        Command::Train => {
            let s = pipeline::cmd_train(&config)?;
            println!(
                "trained {} epochs; loss {:.4} -> {:.4}; checkpoints in {}",
                s.epoch_losses.len(),
                s.epoch_losses.first().unwrap_or(&f64::NAN),
                s.epoch_losses.last().unwrap_or(&f64::NAN),
                run_dir.join("checkpoints").display()
            );
        }
        Command::FitReliability => {
            let s = pipeline::cmd_fit_reliability(&config)?;
            println!("selected C = {} from the AUROC table:", s.selected_c);
            for row in &s.table {
                println!(
                    "  C = {:>3}: AUROC {:.4}{}",
                    row.c,
                    row.auroc,
                    row.note.as_deref().map(|n| format!(" ({n})")).unwrap_or_default()
                );
            }
            println!("freeze check: {}", s.param_hash_after == s.param_hash_before);
        }
        Command::Evaluate => {
            pipeline::cmd_evaluate(&config)?;
            println!("report written to {}", run_dir.join("reports").display());
        }
        Command::All => {
            pipeline::cmd_all(&config)?;
            println!("artifacts in {}", run_dir.display());
        }
    }
    Ok(())
}
