//! `confound`: file-to-file pipeline for confounder-aware CV ensembles.
//!
//! Exit codes: 0 success, 1 internal failure, 2 user or input error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "confound", version, about = "Confounder-aware CV ensemble pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Export the confounder graph of one or two labeled datasets.
    Detect {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Plan k cross-validation folds with per-fold dev augmentation.
    Split(SplitArgs),
    /// Train one logistic model per fold and write a prediction file for each.
    Train(TrainArgs),
    /// Search ensemble weights that maximize AUROC on a truth file.
    Optimize(OptimizeArgs),
    /// Blend prediction files with a weights file.
    Blend {
        #[arg(required = true)]
        predictions: Vec<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print AUROC and accuracy of a prediction file against a truth file.
    Eval {
        prediction: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Filter detector tags to the allowlist and splice them into record text.
    Tags {
        #[arg(long)]
        dataset: PathBuf,
        /// Line-delimited `{"id": .., "classes": [..]}` detector output.
        #[arg(long)]
        predictions: PathBuf,
        /// Plain-text allowlist, one class per line (defaults to the bundled list).
        #[arg(long)]
        allowlist: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw upsampled batches and print empirical against expected frequencies.
    SampleAudit {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 3.0)]
        upsample_factor: f64,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    #[arg(long, default_value_t = 15)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.5)]
    dev_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    dev: Option<PathBuf>,
    /// CSV with header `id,<features...>`.
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    plan: PathBuf,
    /// Train only this fold (default: every fold).
    #[arg(long)]
    fold: Option<usize>,
    /// Extra labeled datasets whose labels are copied into the prediction files.
    #[arg(long = "labels")]
    label_sources: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.2)]
    margin: f64,
    #[arg(long, default_value_t = 1.8)]
    alpha_pos_ratio: f64,
    #[arg(long, default_value_t = 3.0)]
    upsample_factor: f64,
    #[arg(long, default_value_t = 0.5)]
    learning_rate: f64,
    #[arg(long, default_value_t = 30)]
    max_epochs: usize,
    #[arg(long, default_value_t = 5)]
    patience: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Output directory; receives `fold_<i>.csv` per fold.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct OptimizeArgs {
    #[arg(required = true)]
    predictions: Vec<PathBuf>,
    /// Labeled prediction-format CSV or line-delimited dataset.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, default_value_t = 512)]
    population: usize,
    #[arg(long, default_value_t = 100)]
    generations: usize,
    #[arg(long, default_value_t = 3)]
    tournament: usize,
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    #[arg(long, default_value_t = 0.5)]
    crossover: f64,
    #[arg(long, default_value_t = 1)]
    elitism: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Detect { dataset, dev, out } => commands::detect(&dataset, dev.as_deref(), &out),
        Command::Split(a) => commands::split(&a),
        Command::Train(a) => commands::train(&a),
        Command::Optimize(a) => commands::optimize(&a),
        Command::Blend { predictions, weights, out } => commands::blend(&predictions, &weights, &out),
        Command::Eval { prediction, truth, threshold } => commands::eval(&prediction, &truth, threshold),
        Command::Tags {
            dataset,
            predictions,
            allowlist,
            out,
        } => commands::tags(&dataset, &predictions, allowlist.as_deref(), &out),
        Command::SampleAudit {
            dataset,
            upsample_factor,
            draws,
            seed,
        } => commands::sample_audit(&dataset, upsample_factor, draws, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
