use clap::Args;
use more_core::doublet::{detect_doublets, DoubletConfig, DEFAULT_PCA_DIMS};
use more_core::prep::{compute_qc, filter_cells, DEFAULT_MAX_PCT_MT, DEFAULT_MIN_GENES};
use serde::Serialize;
use serde_json::Map;

use super::{Ctx, MatrixArgs};
use crate::error::CliResult;
use crate::output::{num, write_json, write_table, write_text};
use crate::svg;

#[derive(Debug, Args, Serialize)]
pub struct DoubletArgs {
    #[command(flatten)]
    pub input: MatrixArgs,
    /// QC filter applied before scoring
    #[arg(long, default_value_t = DEFAULT_MIN_GENES)]
    pub min_genes: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_PCT_MT)]
    pub max_pct_mt: f64,
    /// Expected doublet rate
    #[arg(long, default_value_t = 0.06)]
    pub rate: f64,
    /// Simulated doublets per observed cell
    #[arg(long, default_value_t = 2.0)]
    pub sim_ratio: f64,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_PCA_DIMS)]
    pub pca_dims: usize,
    /// HVGs used for the joint PCA
    #[arg(long, default_value_t = 2000)]
    pub n_genes: usize,
    /// Fixed call threshold on L_d instead of the automatic one
    #[arg(long)]
    pub threshold: Option<f64>,
}

/// Writes doublets.tsv, doublets.json and doublet_scores.svg.
pub fn run(ctx: &Ctx, args: &DoubletArgs) -> CliResult<()> {
    let stamp = ctx.stamp("doublets", args);
    let (x, mut cells) = args.input.load(ctx.transpose)?;
    cells.qc = compute_qc(&x);
    let (x, cells) = filter_cells(&x, &cells, args.min_genes, args.max_pct_mt)?;
    let cfg = DoubletConfig {
        rho: args.rate,
        r: args.sim_ratio,
        k: args.k,
        pca_dims: args.pca_dims,
        n_genes: args.n_genes,
        seed: ctx.seed(),
        ..DoubletConfig::default()
    };
    let s = detect_doublets(&x, &cfg, args.threshold)?;
    let rows = (0..cells.len()).map(|i| {
        vec![
            cells.barcodes[i].clone(),
            cells.batch_names[cells.batches[i]].clone(),
            num(s.q[i]),
            num(s.l_d[i]),
            num(s.z[i]),
            s.is_doublet[i].to_string(),
        ]
    });
    write_table(&ctx.out.path("doublets.tsv"), &stamp, &["barcode", "batch", "q", "l_d", "z", "is_doublet"], rows)?;
    let n_called = s.is_doublet.iter().filter(|&&d| d).count();
    let mut m = Map::new();
    m.insert("n_cells".into(), cells.len().into());
    m.insert("n_doublets".into(), n_called.into());
    m.insert("threshold".into(), s.threshold.into());
    m.insert("k_adj".into(), s.k_adj.into());
    m.insert("n_simulated".into(), s.simulated_l_d.len().into());
    write_json(&ctx.out.path("doublets.json"), &stamp, m)?;
    let svg = svg::histograms(
        &[("observed", &s.l_d), ("simulated", &s.simulated_l_d)],
        40,
        Some(s.threshold),
        "Doublet posterior L_d",
        "L_d",
        &stamp.svg_comment(),
    );
    write_text(&ctx.out.path("doublet_scores.svg"), &svg)?;
    eprintln!("doublets: {n_called} of {} cells called at threshold {:.3}", cells.len(), s.threshold);
    Ok(())
}
