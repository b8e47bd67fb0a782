//! `soclm` — staged, reproducible runner for the socially-enriched
//! pre-training pipeline.
//!
//! Each subcommand runs one pipeline stage against a JSON config (the
//! built-in default when `--config` is omitted), writing artifacts and a
//! manifest under the output directory. `all` runs every stage in order.
//!
//! Exit status: 0 on success, 1 for configuration/validation errors
//! (including bad flags and missing upstream artifacts), 2 for runtime
//! errors such as unreadable files.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use soclm::pipeline::{resolve_config, run_stage, Stage};

#[derive(Parser)]
#[command(
    name = "soclm",
    version,
    about = "Socially-enriched language-model pre-training pipeline",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    stage: StageCmd,

    /// JSON config file, deep-merged over the built-in planted-world
    /// defaults; may be partial at any nesting level.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Config override as a dotted path, e.g. --set twhin.lr=0.05
    /// (repeatable; values parse as JSON, falling back to strings).
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    set: Vec<String>,

    /// Output directory; overrides the config's `out_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    /// Worker threads for graph-embedding training; overrides
    /// `twhin.threads`. Ignored in deterministic mode, which always runs
    /// single-threaded.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    /// Force deterministic mode regardless of the config.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum StageCmd {
    /// Generate the planted two-topic world (graph, corpus, labels, records).
    Gen,
    /// Train engagement-graph embeddings from the generated graph.
    EmbedGraph,
    /// Build the (exact or quantized) tweet-embedding index.
    BuildIndex,
    /// Mine socially similar tweet pairs from the index.
    MinePairs,
    /// Stage-1 masked-language pre-training of the encoder.
    Pretrain1,
    /// Stage-2 joint contrastive + masked-language pre-training.
    Pretrain2,
    /// Evaluate engagement prediction (HITS@k) with the stage-2 encoder.
    EvalEngagement,
    /// Evaluate hashtag classification (feature-based and fine-tuned).
    EvalHashtag,
    /// Run the supervision-budget sweep.
    Sweep,
    /// Run every stage in order and write the combined metrics report.
    All,
}

impl StageCmd {
    fn stage(&self) -> Stage {
        match self {
            StageCmd::Gen => Stage::Gen,
            StageCmd::EmbedGraph => Stage::EmbedGraph,
            StageCmd::BuildIndex => Stage::BuildIndex,
            StageCmd::MinePairs => Stage::MinePairs,
            StageCmd::Pretrain1 => Stage::Pretrain1,
            StageCmd::Pretrain2 => Stage::Pretrain2,
            StageCmd::EvalEngagement => Stage::EvalEngagement,
            StageCmd::EvalHashtag => Stage::EvalHashtag,
            StageCmd::Sweep => Stage::Sweep,
            StageCmd::All => Stage::All,
        }
    }
}

fn run(cli: Cli) -> soclm::Result<()> {
    let mut cfg = resolve_config(cli.config.as_deref(), &cli.set)?;
    if let Some(dir) = cli.out_dir {
        cfg.out_dir = dir;
    }
    if let Some(threads) = cli.threads {
        cfg.twhin.threads = threads;
    }
    if cli.deterministic {
        cfg.deterministic = true;
    }
    let manifests = run_stage(&cfg, cli.stage.stage())?;
    for m in &manifests {
        println!("wrote {}", m.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            // Help and version go to stdout with a success status.
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // Bad invocations are validation errors.
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
