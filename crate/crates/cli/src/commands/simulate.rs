use clap::Args;
use more_core::io::write_mtx;
use serde::Serialize;

use super::{label_name, orientation, Ctx};
use crate::config::SyntheticConfig;
use crate::error::CliResult;
use crate::output::write_table;

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 1000)]
    pub cells: usize,
    #[arg(long, default_value_t = 500)]
    pub genes: usize,
    #[arg(long, default_value_t = 3)]
    pub types: usize,
    #[arg(long, default_value_t = 2)]
    pub batches: usize,
    /// Heterotypic sum-doublets appended after the singlets
    #[arg(long, default_value_t = 0)]
    pub doublets: usize,
    #[arg(long, default_value_t = 0.5)]
    pub batch_effect_sd: f64,
}

/// Writes matrix.mtx, genes.tsv, barcodes.tsv and metadata.tsv.
pub fn run(ctx: &Ctx, args: &SimulateArgs) -> CliResult<()> {
    let stamp = ctx.stamp("simulate", args);
    let s = SyntheticConfig {
        cells: args.cells,
        genes: args.genes,
        types: args.types,
        batches: args.batches,
        doublets: args.doublets,
        batch_effect_sd: args.batch_effect_sd,
        ..SyntheticConfig::default()
    };
    let (x, cells) = super::embed::synthetic(&s, ctx.seed())?;
    write_mtx(
        &x,
        &ctx.out.path("matrix.mtx"),
        &ctx.out.path("genes.tsv"),
        &ctx.out.path("barcodes.tsv"),
        orientation(ctx.transpose),
    )?;
    let rows = (0..cells.len()).map(|i| vec![cells.barcodes[i].clone(), cells.batch_names[cells.batches[i]].clone(), label_name(&cells, i)]);
    write_table(&ctx.out.path("metadata.tsv"), &stamp, &["barcode", "batch", "label"], rows)?;
    eprintln!("simulate: {} cells x {} genes", x.n_cells(), x.n_genes());
    Ok(())
}
