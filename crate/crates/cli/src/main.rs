//! `more-kit`: QC, doublet scoring, embedding with frozen encoders and a
//! trained head, Harmony-style baseline, annotation and metrics.

mod commands;
mod config;
mod error;
mod output;
mod report;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::Ctx;
use error::{CliError, CliResult};
use output::OutputDir;

#[derive(Debug, Parser)]
#[command(name = "more-kit", version, about = "Batch-robust single-cell embeddings from frozen encoders")]
#[command(after_help = "Exit codes: 0 success, 1 usage or IO error, 2 numerical failure (NaN abort).")]
struct Cli {
    /// Seed for every random draw (embed falls back to the config seed, then 0)
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores)
    #[arg(long, global = true, env = "MORE_KIT_THREADS")]
    threads: Option<usize>,
    /// Matrix files are stored cells x genes instead of genes x cells
    #[arg(long, global = true)]
    transpose: bool,
    /// Directory for all outputs; locked while the command runs
    #[arg(long, global = true, default_value = "more-kit-out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Per-cell QC table and violin summary, top genes, HVGs and PCA
    Qc(commands::qc::QcArgs),
    /// Simulated-doublet neighbourhood scores and calls
    Doublets(commands::doublets::DoubletArgs),
    /// Train the head on frozen encoder outputs and write refined embeddings
    Embed(commands::embed::EmbedArgs),
    /// Harmony-style correction of an embedding
    Baseline(commands::baseline::BaselineArgs),
    /// Classifier prediction, cluster voting and confidence propagation
    Annotate(commands::annotate::AnnotateArgs),
    /// Integration metrics of an embedding
    #[command(after_help = format!("metrics.json keys:\n{}", report::METRIC_KEYS))]
    Metrics(commands::metrics::MetricsArgs),
    /// Write a synthetic count matrix with batches, cell types and doublets
    Simulate(commands::simulate::SimulateArgs),
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    let ctx = Ctx { seed: cli.seed, transpose: cli.transpose, out: OutputDir::acquire(&cli.out_dir)? };
    match &cli.command {
        Command::Qc(a) => commands::qc::run(&ctx, a),
        Command::Doublets(a) => commands::doublets::run(&ctx, a),
        Command::Embed(a) => commands::embed::run(&ctx, a),
        Command::Baseline(a) => commands::baseline::run(&ctx, a),
        Command::Annotate(a) => commands::annotate::run(&ctx, a),
        Command::Metrics(a) => commands::metrics::run(&ctx, a),
        Command::Simulate(a) => commands::simulate::run(&ctx, a),
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
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
