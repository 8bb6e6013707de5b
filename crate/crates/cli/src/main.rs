//! `flipsbir`: generate → train → finetune → embed → eval → compare.
//!
//! Failures print one JSON line `{"error": kind, "message": ...}` on stderr
//! and exit with status 1 (2 for command-line usage errors).

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use flipsbir::encoders::EmbeddingPool;
use flipsbir::sampling::Strategy;

use crate::commands::FinetuneArgs;
use crate::config::RunConfig;
use crate::error::CliError;

#[derive(Parser, Debug)]
#[command(name = "flipsbir", version, about = "Fine-grained sketch→photo retrieval lab")]
struct Cli {
    /// TOML run configuration; omitted sections keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Pool {
    Global1x1,
    Spatial2x2,
}

impl From<Pool> for EmbeddingPool {
    fn from(p: Pool) -> Self {
        match p {
            Pool::Global1x1 => EmbeddingPool::Global1x1,
            Pool::Spatial2x2 => EmbeddingPool::Spatial2x2,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Writes train.jsonl, test.jsonl, dataset.json and rasters into OUT.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains fresh encoders; also writes OUT with extension .history.json.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides schedule.epochs (the lr drop moves inside the run if needed).
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Continues training a checkpoint at schedule.finetune_lr.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// baseline, flip, category or flip_category.
        #[arg(long, default_value = "baseline")]
        strategy: Strategy,
        /// Swaps the embedding head before finetuning.
        #[arg(long, value_enum)]
        pool: Option<Pool>,
        /// Overrides schedule.epochs.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Writes photos.fgem and sketches.fgem into OUT_DIR.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Scores sketch→photo retrieval from an embed directory; prints the report unless --out is given.
    Eval {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated cutoffs; defaults to eval.ks.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-metric changes between two reports, including error improvement percentages.
    Compare {
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        candidate: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref())?.with_seed(cli.seed);
    match cli.command {
        Command::Generate { out } => commands::generate(&cfg, &out),
        Command::Train { data, out, epochs } => commands::train_cmd(&cfg, &data, &out, epochs),
        Command::Finetune {
            checkpoint,
            data,
            out,
            strategy,
            pool,
            epochs,
        } => commands::finetune_cmd(
            &cfg,
            FinetuneArgs {
                checkpoint: &checkpoint,
                data: &data,
                out: &out,
                strategy,
                pool: pool.map(Into::into),
                epochs,
            },
        ),
        Command::Embed { checkpoint, data, out_dir } => commands::embed(&checkpoint, &data, &out_dir),
        Command::Eval { embeddings, data, k, out } => commands::eval(&cfg, &embeddings, &data, k, out.as_deref()),
        Command::Compare { baseline, candidate, out } => commands::compare(&baseline, &candidate, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let matches = Cli::command().after_long_help(config::default_document()).try_get_matches();
    let cli = match matches.and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let summary: Vec<&str> = msg
                .lines()
                .take_while(|l| !l.trim().is_empty())
                .map(|l| l.trim().trim_start_matches("error: "))
                .collect();
            eprintln!("{}", CliError::Usage(summary.join(" ")).line());
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::FAILURE
        }
    }
}
