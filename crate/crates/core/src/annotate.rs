//! Label prediction, cluster majority voting and confidence-gated
//! neighborhood propagation.

use ndarray::{Array2, ArrayView2, Axis};

use crate::cluster::kmeans;
use crate::io::ExpressionMatrix;
use crate::knn::knn_graph;
use crate::metrics::majority;
use crate::model::{softmax, MoreParams};
use crate::{Error, Result};

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.7;
pub const DEFAULT_K: usize = 15;
pub const DEFAULT_MAX_ROUNDS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnotateConfig {
    pub conf_threshold: f64,
    pub k: usize,
    pub max_rounds: usize,
    /// Clusters for majority voting; `None` means twice the class count.
    pub n_clusters: Option<usize>,
    pub seed: u64,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        Self {
            conf_threshold: DEFAULT_CONF_THRESHOLD,
            k: DEFAULT_K,
            max_rounds: DEFAULT_MAX_ROUNDS,
            n_clusters: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationResult {
    pub predicted: Vec<usize>,
    pub confidence: Vec<f64>,
    pub voted: Vec<usize>,
    pub final_labels: Vec<usize>,
    /// Last propagation round that changed the cell's label (0 = never).
    pub stabilized_round: Vec<usize>,
}

/// Argmax of the classifier softmax per cell (lowest class on ties) and the
/// winning probability.
pub fn predict(params: &MoreParams, emb: ArrayView2<f64>) -> Result<(Vec<usize>, Vec<f64>)> {
    let d = params.dims().d;
    if emb.ncols() != d {
        return Err(Error::Dimension(format!("embeddings have width {}, classifier expects {d}", emb.ncols())));
    }
    let logits = emb.dot(&params.classifier_w.t()) + &params.classifier_b;
    Ok(predict_from_logits(logits.view()))
}

pub fn predict_from_logits(logits: ArrayView2<f64>) -> (Vec<usize>, Vec<f64>) {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let p = softmax(row);
            let best = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let label = p.iter().position(|&v| v == best).unwrap();
            (label, best)
        })
        .unzip()
}

/// Every cell gets its cluster's most frequent label (lowest on ties).
pub fn majority_vote(labels: &[usize], clusters: &[usize]) -> Result<Vec<usize>> {
    if labels.len() != clusters.len() {
        return Err(Error::Dimension(format!("{} labels for {} cluster ids", labels.len(), clusters.len())));
    }
    let n_clusters = clusters.iter().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for (&l, &c) in labels.iter().zip(clusters) {
        members[c].push(l);
    }
    let winners: Vec<Option<usize>> = members.into_iter().map(majority).collect();
    Ok(clusters.iter().map(|&c| winners[c].unwrap()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Propagation {
    pub labels: Vec<usize>,
    pub stabilized_round: Vec<usize>,
    /// Rounds actually run.
    pub rounds: usize,
}

/// Relabels uncertain cells from confident ones over the kNN graph.
///
/// Confident cells (confidence ≥ threshold) are anchors and never change.
/// Each synchronous round, an uncertain cell with at least one anchor among
/// its `k` nearest neighbors takes the anchors' majority label and becomes
/// an anchor itself, so labels spread outward one hop per round. Stops at a
/// round that anchors nobody, or after `max_rounds`. Cells never reached
/// keep their input label.
pub fn propagate_refine(
    labels: &[usize],
    confidences: &[f64],
    emb: ArrayView2<f64>,
    k: usize,
    conf_threshold: f64,
    max_rounds: usize,
) -> Result<Propagation> {
    let n = labels.len();
    if confidences.len() != n || emb.nrows() != n {
        return Err(Error::Dimension("labels, confidences and embeddings differ in length".into()));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let mut current = labels.to_vec();
    let mut stabilized = vec![0; n];
    let mut anchored: Vec<bool> = confidences.iter().map(|&c| c >= conf_threshold).collect();
    if n < 2 || anchored.iter().all(|&a| a) {
        return Ok(Propagation { labels: current, stabilized_round: stabilized, rounds: 0 });
    }
    let graph = knn_graph(emb, k.min(n - 1));
    let mut rounds = 0;
    for round in 1..=max_rounds {
        rounds = round;
        let updates: Vec<(usize, usize)> = (0..n)
            .filter(|&i| !anchored[i])
            .filter_map(|i| {
                let votes = graph[i].iter().filter(|&&j| anchored[j]).map(|&j| current[j]);
                majority(votes).map(|l| (i, l))
            })
            .collect();
        if updates.is_empty() {
            break;
        }
        for (i, l) in updates {
            if current[i] != l {
                current[i] = l;
                stabilized[i] = round;
            }
            anchored[i] = true;
        }
    }
    Ok(Propagation { labels: current, stabilized_round: stabilized, rounds })
}

/// predict, then majority vote over k-means clusters, then propagation.
/// Confident cells keep their predicted label; uncertain cells start from
/// their cluster's vote.
pub fn annotate(params: &MoreParams, emb: ArrayView2<f64>, cfg: &AnnotateConfig) -> Result<AnnotationResult> {
    let n = emb.nrows();
    if n == 0 {
        return Err(Error::InvalidArgument("no cells to annotate".into()));
    }
    let (predicted, confidence) = predict(params, emb)?;
    let k_clusters = cfg.n_clusters.unwrap_or(2 * params.dims().n_classes).clamp(1, n);
    let clusters = kmeans(emb, k_clusters, 4, 100, cfg.seed)?.assignments;
    let voted = majority_vote(&predicted, &clusters)?;
    let start: Vec<usize> = (0..n)
        .map(|i| if confidence[i] >= cfg.conf_threshold { predicted[i] } else { voted[i] })
        .collect();
    let prop = propagate_refine(&start, &confidence, emb, cfg.k, cfg.conf_threshold, cfg.max_rounds)?;
    Ok(AnnotationResult {
        predicted,
        confidence,
        voted,
        final_labels: prop.labels,
        stabilized_round: prop.stabilized_round,
    })
}

/// Mean expression of each marker gene per final label (labels × markers).
/// Unknown marker names are an error.
pub fn marker_report(x: &ExpressionMatrix, markers: &[String], labels: &[usize], n_labels: usize) -> Result<Array2<f64>> {
    if labels.len() != x.n_cells() {
        return Err(Error::Dimension(format!("{} labels for {} cells", labels.len(), x.n_cells())));
    }
    let cols: Vec<usize> = markers
        .iter()
        .map(|m| {
            x.gene_names()
                .iter()
                .position(|g| g == m)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown marker gene {m}")))
        })
        .collect::<Result<_>>()?;
    let dense = x.dense_columns(&cols);
    let mut sums = Array2::zeros((n_labels, cols.len()));
    let mut counts = vec![0.0; n_labels];
    for (i, &l) in labels.iter().enumerate() {
        if l >= n_labels {
            return Err(Error::InvalidArgument(format!("label {l} out of range ({n_labels})")));
        }
        let mut row = sums.row_mut(l);
        row += &dense.row(i);
        counts[l] += 1.0;
    }
    for (mut row, &c) in sums.axis_iter_mut(Axis(0)).zip(&counts) {
        if c > 0.0 {
            row /= c;
        }
    }
    Ok(sums)
}
