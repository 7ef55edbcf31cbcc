use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gknn::config::{self, SEED_ENV};
use gknn::pipeline::{self, RunOptions, Stage, Workspace};

#[derive(Debug, Parser)]
#[command(name = "gknn", version, about = "Gated kNN-MT workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set knn.lambda=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the two synthetic domains and the vocabularies.
    GenData(Common),
    /// Train the base translation model on the general domain.
    TrainModel(Common),
    /// Index the shifted-domain training split.
    BuildDatastore(Common),
    /// Train the adaptive (Meta-k) mixing network.
    TrainMetaK(Common),
    /// Train the retrieval selector.
    TrainSelector(Common),
    /// Decode with `decode.mode`.
    Translate {
        #[command(flatten)]
        common: Common,
        /// Source sentences, one per line; defaults to the shifted test split.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare decoding modes on the shifted test split.
    Benchmark(Common),
    /// Fraction of positions whose argmax survives kNN revision.
    MeasureRedundancy(Common),
    /// Tokens where retrieval most often changes nothing.
    FutileTokens(Common),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (stage, common, opts) = match cli.command {
        Command::GenData(c) => (Stage::GenData, c, RunOptions::default()),
        Command::TrainModel(c) => (Stage::TrainModel, c, RunOptions::default()),
        Command::BuildDatastore(c) => (Stage::BuildDatastore, c, RunOptions::default()),
        Command::TrainMetaK(c) => (Stage::TrainMetaK, c, RunOptions::default()),
        Command::TrainSelector(c) => (Stage::TrainSelector, c, RunOptions::default()),
        Command::Translate { common, input, output } => (Stage::Translate, common, RunOptions { input, output }),
        Command::Benchmark(c) => (Stage::Benchmark, c, RunOptions::default()),
        Command::MeasureRedundancy(c) => (Stage::MeasureRedundancy, c, RunOptions::default()),
        Command::FutileTokens(c) => (Stage::FutileTokens, c, RunOptions::default()),
    };
    let run = || -> anyhow::Result<()> {
        let resolved = config::load(common.config.as_deref(), &common.sets, std::env::var(SEED_ENV).ok())?;
        let ws = Workspace::new(resolved);
        let m = pipeline::run(stage, &ws, &opts)?;
        for path in m.outputs.keys() {
            println!("{path}");
        }
        Ok(())
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
