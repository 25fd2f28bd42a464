//! Command-line interface: synthesise datasets, train, evaluate and export.

mod commands;
mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alifuse::data::SynthSpec;
use alifuse::Error;
use clap::{Parser, Subcommand, ValueEnum};

use crate::commands::TrainArgs;
use crate::config::RunConfig;
use crate::manifest::RunManifest;

#[derive(Parser)]
#[command(name = "alifuse", version, about = "Align and fuse 3D volumes with clinical text")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        side: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0.2)]
        missing_rate: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train on a dataset directory.
    Train {
        /// Dataset directory; taken from the manifest when `--manifest` is given.
        dataset: Option<PathBuf>,
        /// Dataset used to pick the best checkpoint (default: the training set).
        #[arg(long)]
        val: Option<PathBuf>,
        /// JSON run configuration; defaults are used for absent fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Repeat the run described by a `run.json`.
        #[arg(long, conflicts_with_all = ["config", "val"])]
        manifest: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Vocabulary file (default: `vocab.json` next to the checkpoint).
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Report path (default: `eval.json` next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export embeddings or attention maps.
    Export {
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        what: Export,
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Output directory (default: the checkpoint's directory).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Export {
    Embeddings,
    Attention,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Compatibility(_) => 1,
        Error::Format { .. }
        | Error::MagicMismatch { .. }
        | Error::VersionMismatch { .. }
        | Error::Truncated(_)
        | Error::Json(_)
        | Error::Dimension(_)
        | Error::Vocab { .. }
        | Error::Label { .. }
        | Error::Undefined(_) => 2,
        Error::Numeric(_) | Error::Degenerate(_) => 3,
        Error::Io(_) => 4,
    }
}

fn beside(checkpoint: &Path, name: &str) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(name)
}

fn run(command: Command) -> alifuse::Result<()> {
    match command {
        Command::Synth { n, classes, side, noise, missing_rate, seed, out } => {
            commands::synth(&SynthSpec { n, classes, side, noise, missing_rate }, seed, &out)
        }
        Command::Train { dataset, val, config, manifest, seed, out } => {
            let args = match manifest {
                Some(path) => {
                    let m = RunManifest::read(&path)?;
                    TrainArgs {
                        dataset: dataset.unwrap_or(m.dataset),
                        val: m.val_dataset,
                        seed: seed.unwrap_or(m.seed),
                        config: m.config,
                        out,
                    }
                }
                None => {
                    let dataset = dataset.ok_or_else(|| Error::Config("train needs a dataset directory".into()))?;
                    let config = RunConfig::load(config.as_deref())?;
                    let seed = seed.unwrap_or(config.train.seed);
                    TrainArgs { dataset, val, config, seed, out }
                }
            };
            commands::train(args)
        }
        Command::Eval { dataset, checkpoint, vocab, out } => {
            let loaded = commands::load_for_inference(&dataset, &checkpoint, vocab.as_deref())?;
            let out = out.unwrap_or_else(|| beside(&checkpoint, "eval.json"));
            commands::eval(&loaded, &out).map(|_| ())
        }
        Command::Export { dataset, checkpoint, what, vocab, out } => {
            let loaded = commands::load_for_inference(&dataset, &checkpoint, vocab.as_deref())?;
            let out = out.unwrap_or_else(|| beside(&checkpoint, ""));
            match what {
                Export::Embeddings => commands::export_embeddings(&loaded, &out).map(|_| ()),
                Export::Attention => commands::export_attention(&loaded, &out),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
