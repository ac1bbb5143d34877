//! `relext`: generate synthetic corpora, train, evaluate, run ablations and
//! the low-attention filtering experiment.
//!
//! Log verbosity comes from `RELEXT_LOG` (`error` .. `trace`, default `info`).

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "relext", version, about = "Distantly supervised relation extraction with adversarial regularizers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus overrides. Overrides win over the file, `--seed` wins
/// over both.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic train/test corpus.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a corpus directory and write a checkpoint.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the test split with a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a grid of variants over consecutive seeds on fresh synthetic corpora.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        #[arg(long, value_delimiter = ',', default_value = "baseline,bat,ivat,ivat+bat")]
        variants: Vec<String>,
        #[arg(long, default_value = "ablation")]
        out: PathBuf,
    },
    /// Filter low-attention training instances and retrain.
    FilterExp {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.1,0.2")]
        thresholds: Vec<f64>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long, value_delimiter = ',', default_value = "baseline,ivat+bat")]
        methods: Vec<String>,
        /// Variant whose full-data attention decides what gets filtered.
        #[arg(long, default_value = "baseline")]
        scorer: String,
        #[arg(long, default_value = "filter")]
        out: PathBuf,
    },
    /// Histogram of gold-query attention over the training bags.
    Histogram {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RELEXT_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out } => commands::gen_data(&config, &out),
        Command::Train { config, data, out } => commands::train(&config, &data, &out),
        Command::Eval { ckpt, data, out } => commands::eval(&ckpt, &data, &out),
        Command::Ablate { config, seeds, variants, out } => commands::ablate(&config, seeds, &variants, &out),
        Command::FilterExp { config, thresholds, seeds, methods, scorer, out } => {
            commands::filter_exp(&config, &thresholds, seeds, &methods, &scorer, &out)
        }
        Command::Histogram { ckpt, data, out } => commands::histogram(&ckpt, &data, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
