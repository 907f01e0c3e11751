//! `revhrnet` command-line entry point.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use revhrnet::dataio::Split;
use revhrnet::SegError;
use revhrnet_core::CoreError;

use commands::TrainOverrides;

#[derive(Parser)]
#[command(name = "revhrnet", version, about = "Frozen-encoder / reverse-HRNet segmentation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic shapes corpus.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        count: usize,
        /// Square image side; a multiple of 32.
        #[arg(long)]
        size: usize,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the decoder; writes model.ckpt, its sidecar and train.jsonl into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Print metrics JSON for one split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Label one PPM image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Output PGM of class ids.
        #[arg(long)]
        out: PathBuf,
        /// Optional palette-rendered PPM.
        #[arg(long)]
        color: Option<PathBuf>,
    },
    /// Write one stride-<s>.pgm per adapted stream.
    DumpFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter, MAC and memory report; with --compare, ratios other/config.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Input size as HxW.
        #[arg(long, default_value = "64x64", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long)]
        json: bool,
    },
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW, e.g. 64x64")?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(h)?, parse(w)?))
}

/// 2 invalid input, 3 incompatible artifact, 4 numeric failure.
fn exit_code(err: &SegError) -> u8 {
    match err {
        SegError::FingerprintMismatch { .. } | SegError::ParamMismatch(_) | SegError::Checkpoint(_) => 3,
        SegError::NonFinite { .. } | SegError::Core(CoreError::NonFinite { .. }) => 4,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate {
            seed,
            count,
            size,
            classes,
            out,
        } => commands::generate(*seed, *count, *size, *classes, out),
        Command::Train { config, out, overrides } => commands::train_cmd(config, out, overrides),
        Command::Eval {
            config,
            checkpoint,
            split,
            dataset,
        } => commands::eval_cmd(config, checkpoint, *split, dataset.as_deref()),
        Command::Predict {
            checkpoint,
            image,
            out,
            color,
        } => commands::predict(checkpoint, image, out, color.as_deref()),
        Command::DumpFeatures { checkpoint, image, out } => commands::dump_features(checkpoint, image, out),
        Command::Analyze {
            config,
            compare,
            size,
            json,
        } => commands::analyze_cmd(config, compare.as_deref(), *size, *json),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
