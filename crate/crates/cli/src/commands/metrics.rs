use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::Args;
use more_core::metrics::per_class_recall;
use more_core::CellTable;
use serde::Serialize;
use serde_json::{Map, Value};

use super::{load_embeddings, Ctx};
use crate::error::{CliError, CliResult};
use crate::output::write_json;
use crate::report::{integration_metrics, json_f64, DEFAULT_METRIC_K};

#[derive(Debug, Args, Serialize)]
pub struct MetricsArgs {
    /// Embeddings TSV
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Replaces the batch and label columns of the embeddings file
    #[arg(long)]
    pub metadata: Option<PathBuf>,
    /// annotation.tsv to score against the labels
    #[arg(long)]
    pub annotation: Option<PathBuf>,
    /// Neighbours for batch entropy and label transfer
    #[arg(long, default_value_t = DEFAULT_METRIC_K)]
    pub k: usize,
}

/// Final label per barcode from an annotation table.
fn read_annotation(path: &Path) -> CliResult<HashMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
    let header: Vec<&str> = lines.next().unwrap_or("").split('\t').collect();
    let col = |n: &str| {
        header
            .iter()
            .position(|h| *h == n)
            .ok_or_else(|| CliError::Usage(format!("{}: missing column {n:?}", path.display())))
    };
    let (bc, fin) = (col("barcode")?, col("final")?);
    lines
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            match (f.get(bc), f.get(fin)) {
                (Some(b), Some(v)) => Ok((b.to_string(), v.to_string())),
                _ => Err(CliError::Usage(format!("{}: short row {l:?}", path.display()))),
            }
        })
        .collect()
}

/// Accuracy and per-label recall of annotated labels on labeled cells.
fn annotation_scores(cells: &CellTable, ann: &HashMap<String, String>) -> CliResult<(Option<f64>, Value)> {
    let mut truth = Vec::new();
    let mut pred = Vec::new();
    for (i, bc) in cells.barcodes.iter().enumerate() {
        let Some(l) = cells.labels[i] else { continue };
        let a = ann
            .get(bc)
            .ok_or_else(|| CliError::Usage(format!("barcode {bc} has no annotation")))?;
        truth.push(l);
        // names outside the label set can never be correct
        pred.push(cells.label_names.iter().position(|n| n == a).unwrap_or(usize::MAX));
    }
    if truth.is_empty() {
        return Ok((None, Value::Null));
    }
    let acc = truth.iter().zip(&pred).filter(|(t, p)| t == p).count() as f64 / truth.len() as f64;
    let rec = per_class_recall(&truth, &pred, cells.n_labels())?;
    let map: Map<String, Value> = cells.label_names.iter().cloned().zip(rec.into_iter().map(json_f64)).collect();
    Ok((Some(acc), Value::Object(map)))
}

/// Writes metrics.json.
pub fn run(ctx: &Ctx, args: &MetricsArgs) -> CliResult<()> {
    let stamp = ctx.stamp("metrics", args);
    let (emb, cells) = load_embeddings(&args.embeddings, args.metadata.as_deref())?;
    let mut m = integration_metrics(emb.data.view(), &cells, args.k, ctx.seed())?;
    if let Some(p) = &args.annotation {
        let (acc, rec) = annotation_scores(&cells, &read_annotation(p)?)?;
        m.insert("annotation_accuracy".into(), json_f64(acc));
        m.insert("annotation_per_class_recall".into(), rec);
    }
    eprintln!(
        "metrics: ari {} silhouette {} batch_entropy {}",
        m["ari"], m["silhouette"], m["batch_entropy"]
    );
    write_json(&ctx.out.path("metrics.json"), &stamp, m)
}
