use std::path::{Path, PathBuf};

use clap::Args;
use more_core::annotate::{annotate, marker_report, AnnotateConfig, DEFAULT_CONF_THRESHOLD, DEFAULT_K, DEFAULT_MAX_ROUNDS};
use more_core::io::{read_mtx, ParamFile};
use more_core::model::MoreParams;
use more_core::prep::{normalize_log1p, DEFAULT_TARGET_SUM};
use serde::Serialize;

use super::{load_embeddings, orientation, Ctx};
use crate::error::{CliError, CliResult};
use crate::output::{num, write_table};

#[derive(Debug, Args, Serialize)]
pub struct AnnotateArgs {
    /// Trained parameter file (params.bin from `embed`)
    #[arg(long)]
    pub params: PathBuf,
    /// Refined embeddings TSV
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Class names, one per line (classes.txt from `embed`)
    #[arg(long)]
    pub classes: Option<PathBuf>,
    /// Minimum softmax probability for a cell to count as confident
    #[arg(long, default_value_t = DEFAULT_CONF_THRESHOLD)]
    pub conf_threshold: f64,
    /// Confident neighbours consulted during propagation
    #[arg(long, default_value_t = DEFAULT_K)]
    pub k: usize,
    #[arg(long, default_value_t = DEFAULT_MAX_ROUNDS)]
    pub max_rounds: usize,
    /// k-means clusters for majority voting (default: twice the class count)
    #[arg(long)]
    pub clusters: Option<usize>,
    /// Comma-separated marker genes for markers.tsv (needs the matrix flags)
    #[arg(long, value_delimiter = ',')]
    pub markers: Vec<String>,
    #[arg(long, requires_all = ["genes", "barcodes"])]
    pub matrix: Option<PathBuf>,
    #[arg(long)]
    pub genes: Option<PathBuf>,
    #[arg(long)]
    pub barcodes: Option<PathBuf>,
}

fn read_classes(path: &Path) -> CliResult<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect())
}

/// Writes annotation.tsv and, with `--markers`, markers.tsv.
pub fn run(ctx: &Ctx, args: &AnnotateArgs) -> CliResult<()> {
    let stamp = ctx.stamp("annotate", args);
    let params = MoreParams::import(&ParamFile::read(&args.params)?)?;
    let (emb, cells) = load_embeddings(&args.embeddings, None)?;
    let mut names = match &args.classes {
        Some(p) => read_classes(p)?,
        None => Vec::new(),
    };
    let n_classes = params.dims().n_classes;
    names.extend((names.len()..n_classes).map(|c| format!("class{c}")));
    let cfg = AnnotateConfig {
        conf_threshold: args.conf_threshold,
        k: args.k,
        max_rounds: args.max_rounds,
        n_clusters: args.clusters,
        seed: ctx.seed(),
    };
    let r = annotate(&params, emb.data.view(), &cfg)?;
    let rows = (0..cells.len()).map(|i| {
        vec![
            cells.barcodes[i].clone(),
            cells.batch_names[cells.batches[i]].clone(),
            names[r.predicted[i]].clone(),
            num(r.confidence[i]),
            names[r.voted[i]].clone(),
            names[r.final_labels[i]].clone(),
            r.stabilized_round[i].to_string(),
        ]
    });
    write_table(
        &ctx.out.path("annotation.tsv"),
        &stamp,
        &["barcode", "batch", "predicted", "confidence", "voted", "final", "stabilized_round"],
        rows,
    )?;
    let changed = (0..cells.len()).filter(|&i| r.final_labels[i] != r.predicted[i]).count();
    eprintln!("annotate: {} cells, {changed} relabeled from the classifier prediction", cells.len());

    if args.markers.is_empty() {
        return Ok(());
    }
    let (Some(m), Some(g), Some(b)) = (&args.matrix, &args.genes, &args.barcodes) else {
        return Err(CliError::Usage("--markers needs --matrix, --genes and --barcodes".into()));
    };
    let x = read_mtx(m, g, b, orientation(ctx.transpose))?;
    let index: std::collections::HashMap<&str, usize> = x.barcodes().iter().enumerate().map(|(i, b)| (b.as_str(), i)).collect();
    let mut keep = vec![false; x.n_cells()];
    let mut order = Vec::with_capacity(cells.len());
    for bc in &cells.barcodes {
        let i = *index
            .get(bc.as_str())
            .ok_or_else(|| CliError::Usage(format!("barcode {bc} from the embeddings is not in {}", b.display())))?;
        keep[i] = true;
        order.push(i);
    }
    // labels follow matrix row order after selection
    let mut label_of = vec![0; x.n_cells()];
    for (row, &i) in order.iter().enumerate() {
        label_of[i] = r.final_labels[row];
    }
    let sub = normalize_log1p(&x.select_cells(&keep)?, DEFAULT_TARGET_SUM)?;
    let labels: Vec<usize> = (0..x.n_cells()).filter(|&i| keep[i]).map(|i| label_of[i]).collect();
    let means = marker_report(&sub, &args.markers, &labels, n_classes)?;
    let mut header = vec!["label"];
    header.extend(args.markers.iter().map(String::as_str));
    let rows = (0..n_classes).map(|c| {
        let mut row = vec![names[c].clone()];
        row.extend(means.row(c).iter().map(|v| num(*v)));
        row
    });
    write_table(&ctx.out.path("markers.tsv"), &stamp, &header, rows)
}
