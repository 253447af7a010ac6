use std::path::PathBuf;

use clap::Args;
use more_core::harmony::{run_harmony, HarmonyConfig, DEFAULT_CLUSTERS, DEFAULT_LAMBDA_DIV, DEFAULT_ROUNDS, DEFAULT_SIGMA};
use more_core::io::write_embeddings_with_header;
use more_core::{Embeddings, Provenance};
use serde::Serialize;

use super::{load_embeddings, write_scatters, Ctx};
use crate::error::CliResult;
use crate::output::write_json;
use crate::report::{integration_metrics, DEFAULT_METRIC_K};

#[derive(Debug, Args, Serialize)]
pub struct BaselineArgs {
    /// Embeddings TSV to correct (e.g. pca.tsv from `qc`)
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Replaces the batch and label columns of the embeddings file
    #[arg(long)]
    pub metadata: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_CLUSTERS)]
    pub clusters: usize,
    /// Soft-assignment bandwidth
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    pub sigma: f64,
    /// Diversity penalty strength
    #[arg(long, default_value_t = DEFAULT_LAMBDA_DIV)]
    pub lambda_div: f64,
    #[arg(long, default_value_t = DEFAULT_ROUNDS)]
    pub rounds: usize,
}

/// Writes corrected_embeddings.tsv, metrics.json (corrected),
/// input_metrics.json and corrected_batch/label scatter plots.
pub fn run(ctx: &Ctx, args: &BaselineArgs) -> CliResult<()> {
    let stamp = ctx.stamp("baseline", args);
    let (emb, cells) = load_embeddings(&args.embeddings, args.metadata.as_deref())?;
    let cfg = HarmonyConfig {
        n_clusters: args.clusters,
        lambda_div: args.lambda_div,
        sigma: args.sigma,
        rounds: args.rounds,
        seed: ctx.seed(),
    };
    let corrected = Embeddings::new(run_harmony(emb.data.view(), &cells.batches, &cfg)?, Provenance::Corrected);
    write_embeddings_with_header(&corrected, &cells, &ctx.out.path("corrected_embeddings.tsv"), &stamp.comments())?;
    let before = integration_metrics(emb.data.view(), &cells, DEFAULT_METRIC_K, ctx.seed())?;
    let after = integration_metrics(corrected.data.view(), &cells, DEFAULT_METRIC_K, ctx.seed())?;
    eprintln!(
        "baseline: batch entropy {} -> {}",
        before["batch_entropy"], after["batch_entropy"]
    );
    write_json(&ctx.out.path("input_metrics.json"), &stamp, before)?;
    write_json(&ctx.out.path("metrics.json"), &stamp, after)?;
    write_scatters(ctx, &stamp, &corrected, &cells, "corrected")
}
