mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use config::{CommonArgs, KnnArgs, ModelArgs, SplitArgs, TrainArgs};

#[derive(Debug, Parser)]
#[command(name = "morphoclass", version, about = "Taxol exposure classification from phase-contrast images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum StrategyArg {
    Fc,
    Knn,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Scan the dataset, assign a stratified split and write the manifest.
    Split {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Fine-tune a backbone; writes the best checkpoint and the epoch log.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Write embeddings of the requested splits.
    Embed {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated subset of train,val,test.
        #[arg(long, value_delimiter = ',', default_value = "train,val,test")]
        splits: Vec<String>,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Score a checkpoint on the test split with one strategy.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "knn")]
        strategy: StrategyArg,
        #[command(flatten)]
        knn: KnnArgs,
        #[arg(long)]
        batch_size: Option<usize>,
    },
    /// Train both backbones and score all four variants.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        knn: KnnArgs,
    },
    /// Render confusion matrices from metrics files into one PNG.
    Plot {
        /// Metrics JSON files, one panel each.
        #[arg(long = "metrics", required = true, num_args = 1..)]
        metrics: Vec<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Defaults to <out-dir>/confusion_matrices.png.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate a small textured stand-in dataset.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 14)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        image_size: u32,
        #[arg(long, default_value_t = 12.0)]
        noise: f32,
        #[arg(long, env = config::SEED_ENV, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
