use clap::Args;
use more_core::io::write_embeddings_with_header;
use more_core::prep::{
    compute_qc, normalize_log1p, pca, select_hvg, top_expressed, DEFAULT_MAX_PCT_MT, DEFAULT_MIN_GENES, DEFAULT_N_BINS,
    DEFAULT_N_TOP, DEFAULT_TARGET_SUM,
};
use more_core::Provenance;
use serde::Serialize;

use super::{write_scatters, Ctx, MatrixArgs};
use crate::error::CliResult;
use crate::output::{num, write_table, write_text};
use crate::svg;

/// Cells needed before HVG and PCA are attempted.
const MIN_CELLS_FOR_PCA: usize = 3;

#[derive(Debug, Args, Serialize)]
pub struct QcArgs {
    #[command(flatten)]
    pub input: MatrixArgs,
    /// Minimum detected genes for a cell to pass
    #[arg(long, default_value_t = DEFAULT_MIN_GENES)]
    pub min_genes: usize,
    /// Maximum mitochondrial percentage for a cell to pass
    #[arg(long, default_value_t = DEFAULT_MAX_PCT_MT)]
    pub max_pct_mt: f64,
    #[arg(long, default_value_t = DEFAULT_TARGET_SUM)]
    pub target_sum: f64,
    /// Genes listed in top_genes.tsv
    #[arg(long, default_value_t = 20)]
    pub top_genes: usize,
    #[arg(long, default_value_t = DEFAULT_N_TOP)]
    pub n_hvg: usize,
    #[arg(long, default_value_t = 50)]
    pub n_pcs: usize,
}

/// Writes qc.tsv, qc_violin.svg and top_genes.tsv for every cell, then
/// hvg.tsv, pca_variance.tsv, pca.tsv and pca_batch.svg for passing cells.
pub fn run(ctx: &Ctx, args: &QcArgs) -> CliResult<()> {
    let stamp = ctx.stamp("qc", args);
    let (x, mut cells) = args.input.load(ctx.transpose)?;
    cells.qc = compute_qc(&x);
    let pass: Vec<bool> = cells
        .qc
        .iter()
        .map(|q| q.n_genes_by_counts >= args.min_genes && q.pct_counts_mt <= args.max_pct_mt)
        .collect();
    let rows = (0..cells.len()).map(|i| {
        let q = &cells.qc[i];
        vec![
            cells.barcodes[i].clone(),
            cells.batch_names[cells.batches[i]].clone(),
            q.n_genes_by_counts.to_string(),
            num(q.total_counts),
            num(q.pct_counts_mt),
            num(q.pct_counts_ribo),
            pass[i].to_string(),
        ]
    });
    write_table(
        &ctx.out.path("qc.tsv"),
        &stamp,
        &["barcode", "batch", "n_genes_by_counts", "total_counts", "pct_counts_mt", "pct_counts_ribo", "pass_qc"],
        rows,
    )?;
    let panels = [
        ("n_genes_by_counts", cells.qc.iter().map(|q| q.n_genes_by_counts as f64).collect()),
        ("total_counts", cells.qc.iter().map(|q| q.total_counts).collect()),
        ("pct_counts_mt", cells.qc.iter().map(|q| q.pct_counts_mt).collect()),
        ("pct_counts_ribo", cells.qc.iter().map(|q| q.pct_counts_ribo).collect()),
    ];
    write_text(&ctx.out.path("qc_violin.svg"), &svg::violins(&panels, "Per-cell QC metrics", &stamp.svg_comment()))?;
    let top = top_expressed(&x, args.top_genes);
    write_table(
        &ctx.out.path("top_genes.tsv"),
        &stamp,
        &["gene", "pct_of_counts"],
        top.into_iter().map(|(g, p)| vec![g, num(p)]),
    )?;

    let n_pass = pass.iter().filter(|&&p| p).count();
    eprintln!("qc: {n_pass} of {} cells pass (min_genes {}, max_pct_mt {})", cells.len(), args.min_genes, args.max_pct_mt);
    if n_pass < MIN_CELLS_FOR_PCA {
        eprintln!("qc: fewer than {MIN_CELLS_FOR_PCA} passing cells, skipping HVG and PCA");
        return Ok(());
    }
    let kept = x.select_cells(&pass)?;
    let mut kept_cells = cells.select(&pass);
    kept_cells.compact();
    let norm = normalize_log1p(&kept, args.target_sum)?;
    let hvg = select_hvg(&norm, args.n_hvg.min(norm.n_genes()).max(1), DEFAULT_N_BINS)?;
    let rows = (0..norm.n_genes()).map(|g| {
        vec![
            norm.gene_names()[g].clone(),
            num(hvg.means[g]),
            num(hvg.dispersions[g]),
            num(hvg.z_scores[g]),
            hvg.selected[g].to_string(),
        ]
    });
    write_table(&ctx.out.path("hvg.tsv"), &stamp, &["gene", "mean", "dispersion", "z_score", "selected"], rows)?;

    let genes = hvg.selected_ranked();
    let dense = norm.dense_columns(&genes);
    let k = args.n_pcs.min(dense.nrows()).min(dense.ncols());
    if k == 0 {
        return Ok(());
    }
    let (model, scores) = pca(dense.view(), k, ctx.seed())?;
    let rows = (0..k).map(|c| vec![(c + 1).to_string(), num(model.explained_variance[c]), num(model.explained_variance_ratio[c])]);
    write_table(&ctx.out.path("pca_variance.tsv"), &stamp, &["component", "variance", "variance_ratio"], rows)?;
    let scores = more_core::Embeddings::new(scores.data, Provenance::Pca);
    write_embeddings_with_header(&scores, &kept_cells, &ctx.out.path("pca.tsv"), &stamp.comments())?;
    write_scatters(ctx, &stamp, &scores, &kept_cells, "pca")
}
