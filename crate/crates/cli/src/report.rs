//! The integration metrics object shared by `embed`, `baseline` and
//! `metrics`, plus the 2-D PCA projection used for scatter plots.

use more_core::cluster::kmeans;
use more_core::metrics::{ari, batch_entropy, label_transfer_accuracy, per_class_recall, silhouette};
use more_core::prep::pca;
use more_core::{CellTable, Result};
use ndarray::{Array2, ArrayView2, Axis};
use serde_json::{Map, Value};

pub const DEFAULT_METRIC_K: usize = 15;

/// Keys of the metrics object, documented in `more-kit metrics --help`.
pub const METRIC_KEYS: &str = "\
n_cells, dim            cells and embedding width
batch_entropy           mean normalized batch entropy of each cell's k nearest neighbours (1 = mixed)
ari                     adjusted Rand index of k-means (k = number of labels) against the labels
silhouette              mean silhouette of the labeled cells grouped by label
label_transfer_accuracy kNN accuracy, labeled cells split alternately into train and test halves
per_class_recall        recall of that kNN transfer per label (null when a label has no test cells)
config_hash, seed       provenance of the run
with --annotation:
annotation_accuracy     share of labeled cells whose final annotation equals the label
annotation_per_class_recall  that share per label
from `embed` only:
backbone_hashes, backbones_unchanged  encoder weight hashes and whether training left them intact
trainable_parameters, backbone_parameters, final_loss";

/// Label-dependent metrics are null when fewer than two labels are present.
pub fn integration_metrics(emb: ArrayView2<f64>, cells: &CellTable, k: usize, seed: u64) -> Result<Map<String, Value>> {
    let n = emb.nrows();
    let mut m = Map::new();
    m.insert("n_cells".into(), n.into());
    m.insert("dim".into(), emb.ncols().into());
    let entropy = if n >= 2 { Some(batch_entropy(emb, &cells.batches, k.clamp(1, n - 1))?) } else { None };
    m.insert("batch_entropy".into(), json_f64(entropy));

    let labeled: Vec<usize> = (0..n).filter(|&i| cells.labels[i].is_some()).collect();
    let labels: Vec<usize> = labeled.iter().map(|&i| cells.labels[i].unwrap()).collect();
    let mut distinct = labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    let sub = emb.select(Axis(0), &labeled);

    let (mut ari_v, mut sil, mut lta) = (None, None, None);
    let mut recall = Value::Null;
    if distinct.len() >= 2 && labeled.len() > distinct.len() {
        let km = kmeans(sub.view(), distinct.len(), 10, 100, seed)?;
        ari_v = Some(ari(&km.assignments, &labels)?);
        sil = Some(silhouette(sub.view(), &labels)?);
        let (train, test): (Vec<usize>, Vec<usize>) = (0..labeled.len()).partition(|i| i % 2 == 0);
        let tr_labels: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let te_labels: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
        let tr = sub.select(Axis(0), &train);
        let te = sub.select(Axis(0), &test);
        let kk = k.clamp(1, train.len());
        lta = Some(label_transfer_accuracy(tr.view(), &tr_labels, te.view(), &te_labels, kk)?);
        let pred = knn_predict(tr.view(), &tr_labels, te.view(), kk);
        let rec = per_class_recall(&te_labels, &pred, cells.n_labels())?;
        let mut r = Map::new();
        for (name, v) in cells.label_names.iter().zip(rec) {
            r.insert(name.clone(), json_f64(v));
        }
        recall = Value::Object(r);
    }
    m.insert("ari".into(), json_f64(ari_v));
    m.insert("silhouette".into(), json_f64(sil));
    m.insert("label_transfer_accuracy".into(), json_f64(lta));
    m.insert("per_class_recall".into(), recall);
    Ok(m)
}

/// Majority label of the k nearest training cells, lowest label on ties.
pub fn knn_predict(train: ArrayView2<f64>, labels: &[usize], test: ArrayView2<f64>, k: usize) -> Vec<usize> {
    more_core::knn::knn_query(train, test, k)
        .iter()
        .map(|nb| {
            let mut counts = std::collections::BTreeMap::new();
            for &j in nb {
                *counts.entry(labels[j]).or_insert(0usize) += 1;
            }
            let best = counts.values().copied().max().unwrap_or(0);
            counts.into_iter().find(|&(_, c)| c == best).map_or(0, |(l, _)| l)
        })
        .collect()
}

pub fn json_f64(v: Option<f64>) -> Value {
    v.filter(|x| x.is_finite()).map_or(Value::Null, Value::from)
}

/// First two principal components (a zero column pads 1-D input).
pub fn project_2d(emb: ArrayView2<f64>, seed: u64) -> Result<Vec<(f64, f64)>> {
    let (n, d) = emb.dim();
    let k = 2.min(n).min(d);
    if k == 0 {
        return Ok(vec![(0.0, 0.0); n]);
    }
    let (_, scores) = pca(emb, k, seed)?;
    let s: Array2<f64> = scores.data;
    Ok((0..n).map(|i| (s[[i, 0]], if k > 1 { s[[i, 1]] } else { 0.0 })).collect())
}
