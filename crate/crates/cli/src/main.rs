//! `hierzoom`: the pipeline driver. Subcommands generate data, pretrain
//! the patch CNN, train, evaluate, score single images, and render the
//! zoom hierarchy. Exit status 0 on success, 1 for usage/configuration
//! errors, 2 for data/file errors; every failure prints one diagnostic
//! line to stderr.

mod commands;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "hierzoom",
    about = "Hierarchical zoom-graph image classification"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
pub(crate) struct Common {
    /// Configuration file (sections [data], [model], [train]).
    #[arg(long)]
    pub(crate) config: PathBuf,

    /// Directory for this command's artifacts.
    #[arg(long, default_value = "out")]
    pub(crate) out: PathBuf,

    /// Overrides both the data seed and the train seed.
    #[arg(long)]
    pub(crate) seed: Option<u64>,

    /// Overwrite existing outputs instead of refusing.
    #[arg(long)]
    pub(crate) force: bool,

    /// Config overrides, applied after the file: section.key=value.
    #[arg(value_name = "KEY=VALUE")]
    pub(crate) overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into the configured data directory.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the CNN on lesion patches; writes pretrain.ckpt.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Train the full model; writes model.ckpt and train.log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Patch-pretraining checkpoint to initialize both CNNs from.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Evaluate a trained model on one dataset split; writes eval.txt.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Split to evaluate: train or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Score a single PGM image with a trained model.
    Infer {
        #[command(flatten)]
        common: Common,
        /// Image to classify.
        #[arg(long)]
        image: PathBuf,
    },
    /// Render per-level zoom overlays and the graph dump for one sample.
    Visualize {
        #[command(flatten)]
        common: Common,
        /// Manifest id of the sample to render.
        #[arg(long)]
        sample: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments");
            eprintln!("{first} (run with --help for usage)");
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::GenData { common } => commands::gen_data(&common),
        Command::Pretrain { common } => commands::pretrain(&common),
        Command::Train { common, pretrained } => commands::train(&common, pretrained.as_deref()),
        Command::Eval { common, split } => commands::eval(&common, &split),
        Command::Infer { common, image } => commands::infer(&common, &image),
        Command::Visualize { common, sample } => commands::visualize(&common, &sample),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
