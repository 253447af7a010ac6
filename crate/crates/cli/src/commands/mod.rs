pub mod annotate;
pub mod baseline;
pub mod doublets;
pub mod embed;
pub mod metrics;
pub mod qc;
pub mod simulate;

use std::path::PathBuf;

use clap::Args;
use more_core::io::{read_cell_metadata, read_cell_metadata_for, read_embeddings, read_mtx, Orientation};
use more_core::{CellTable, Embeddings, ExpressionMatrix};
use serde::Serialize;

use crate::error::CliResult;
use crate::output::{OutputDir, Stamp};
use crate::svg;

/// Global settings every subcommand sees.
pub struct Ctx {
    pub seed: Option<u64>,
    pub transpose: bool,
    pub out: OutputDir,
}

impl Ctx {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn stamp(&self, command: &str, args: &impl Serialize) -> Stamp {
        Stamp::new(command, &(args, self.transpose), self.seed())
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct MatrixArgs {
    /// MatrixMarket coordinate file (genes x cells unless --transpose)
    #[arg(long)]
    pub matrix: PathBuf,
    /// Gene names, one per line
    #[arg(long)]
    pub genes: PathBuf,
    /// Cell barcodes, one per line
    #[arg(long)]
    pub barcodes: PathBuf,
    /// TSV with columns barcode, batch and optional label
    #[arg(long)]
    pub metadata: Option<PathBuf>,
}

pub fn orientation(transpose: bool) -> Orientation {
    if transpose {
        Orientation::CellsByGenes
    } else {
        Orientation::GenesByCells
    }
}

impl MatrixArgs {
    pub fn load(&self, transpose: bool) -> CliResult<(ExpressionMatrix, CellTable)> {
        let x = read_mtx(&self.matrix, &self.genes, &self.barcodes, orientation(transpose))?;
        let cells = match &self.metadata {
            Some(p) => read_cell_metadata(p, &x)?,
            None => CellTable::single_batch(x.barcodes().to_vec()),
        };
        Ok((x, cells))
    }
}

/// Embeddings TSV, with batch and label columns optionally replaced from a
/// metadata file.
pub fn load_embeddings(path: &std::path::Path, metadata: Option<&std::path::Path>) -> CliResult<(Embeddings, CellTable)> {
    let (emb, cells) = read_embeddings(path)?;
    match metadata {
        Some(m) => Ok((emb, read_cell_metadata_for(m, &cells.barcodes)?)),
        None => Ok((emb, cells)),
    }
}

/// Scatter plots of the first two principal components colored by batch
/// and, when present, by label.
pub fn write_scatters(ctx: &Ctx, stamp: &Stamp, emb: &Embeddings, cells: &CellTable, prefix: &str) -> CliResult<()> {
    let pts = crate::report::project_2d(emb.data.view(), stamp.seed)?;
    let by_batch: Vec<Option<usize>> = cells.batches.iter().map(|&b| Some(b)).collect();
    let svg = svg::scatter(
        &pts,
        &by_batch,
        &cells.batch_names,
        &format!("{} embedding by batch", emb.provenance),
        ("PC1", "PC2"),
        &stamp.svg_comment(),
    );
    crate::output::write_text(&ctx.out.path(&format!("{prefix}_batch.svg")), &svg)?;
    if cells.has_labels() {
        let svg = svg::scatter(
            &pts,
            &cells.labels,
            &cells.label_names,
            &format!("{} embedding by label", emb.provenance),
            ("PC1", "PC2"),
            &stamp.svg_comment(),
        );
        crate::output::write_text(&ctx.out.path(&format!("{prefix}_label.svg")), &svg)?;
    }
    Ok(())
}

pub fn label_name(cells: &CellTable, i: usize) -> String {
    cells.labels[i].map_or_else(|| "NA".to_string(), |l| cells.label_names[l].clone())
}
