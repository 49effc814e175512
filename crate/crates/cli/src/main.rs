use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use termclust::pipeline::{self, PipelineConfig, PipelineError};

#[derive(Parser)]
#[command(name = "termclust", version, about = "Synonym clustering from term embeddings")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; relative paths inside it are taken from its directory.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set partitioner.k=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Read the term and embedding files and normalize them.
    Ingest,
    /// Refine embeddings with the contrastive loss.
    Optimize,
    /// Split the corpus into kNN-graph components.
    Partition,
    /// Cluster every partition with the oracle-gated tree.
    Cluster {
        /// Reuse per-partition checkpoints of an earlier run.
        #[arg(long)]
        resume: bool,
    },
    /// Pairwise precision, recall and F1.
    Eval,
    /// Write a labeled synthetic corpus.
    Synth {
        /// Target directory (default: `<output_dir>/synth`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), PipelineError> {
    pipeline::write_json(std::io::stdout().lock(), value).map_err(|e| PipelineError {
        stage: "output",
        kind: pipeline::FailureKind::Data,
        message: e.to_string(),
    })
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let cfg = PipelineConfig::load(cli.common.config.as_deref(), &cli.common.overrides)?;
    match cli.command {
        Command::Ingest => print_json(&pipeline::cmd_ingest(&cfg)?.stats),
        Command::Optimize => print_json(&pipeline::cmd_optimize(&cfg)?.stats),
        Command::Partition => print_json(&pipeline::cmd_partition(&cfg)?.stats),
        Command::Cluster { resume } => print_json(&pipeline::cmd_cluster(&cfg, resume)?.0),
        Command::Eval => print_json(&pipeline::cmd_eval(&cfg)?.0),
        Command::Synth { out } => print_json(&pipeline::cmd_synth(&cfg, out.as_deref())?.stats),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.common.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
