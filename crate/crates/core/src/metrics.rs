//! Clustering and integration metrics. Neighbor searches are exact and
//! Euclidean, with ties going to the lower cell index.

use std::collections::HashMap;

use ndarray::ArrayView2;

use crate::knn::{knn_graph, knn_query, sq_dist};
use crate::{par, Error, Result};

fn comb2(n: f64) -> f64 {
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index by pair counting. Two trivial partitions that agree
/// score 1.
pub fn ari(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("labelings of length {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::InvalidArgument("ARI needs at least 2 items".into()));
    }
    let mut table: HashMap<(usize, usize), f64> = HashMap::new();
    let mut rows: HashMap<usize, f64> = HashMap::new();
    let mut cols: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *rows.entry(x).or_default() += 1.0;
        *cols.entry(y).or_default() += 1.0;
    }
    // sort before summing so the result does not depend on hash order
    let sum_sorted = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v.into_iter().map(comb2).sum::<f64>()
    };
    let index = sum_sorted(table.into_values().collect());
    let sa = sum_sorted(rows.into_values().collect());
    let sb = sum_sorted(cols.into_values().collect());
    let expected = sa * sb / comb2(a.len() as f64);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Mean silhouette width. Singleton clusters score 0, as do cells with
/// `a = b = 0`.
pub fn silhouette(emb: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let n = emb.nrows();
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} cells", labels.len())));
    }
    let n_clusters = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; n_clusters];
    labels.iter().for_each(|&l| sizes[l] += 1);
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(Error::InvalidArgument("silhouette needs at least 2 non-empty clusters".into()));
    }
    let scores = par::map_range(n, |i| {
        let own = labels[i];
        if sizes[own] == 1 {
            return 0.0;
        }
        let mut sums = vec![0.0; n_clusters];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += sq_dist(emb.row(i), emb.row(j)).sqrt();
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..n_clusters)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m == 0.0 {
            0.0
        } else {
            (b - a) / m
        }
    });
    Ok(scores.iter().sum::<f64>() / n as f64)
}

/// Mean over cells of the batch entropy among the `k` nearest neighbors
/// (self excluded), normalized by `ln B`. A single batch scores 1.
pub fn batch_entropy(emb: ArrayView2<f64>, batches: &[usize], k: usize) -> Result<f64> {
    let n = emb.nrows();
    if batches.len() != n {
        return Err(Error::Dimension(format!("{} batch indices for {n} cells", batches.len())));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let mut present: Vec<usize> = batches.to_vec();
    present.sort_unstable();
    present.dedup();
    if present.len() <= 1 {
        return Ok(1.0);
    }
    if n < 2 {
        return Err(Error::InvalidArgument("batch entropy needs at least 2 cells".into()));
    }
    let slot: HashMap<usize, usize> = present.iter().enumerate().map(|(s, &b)| (b, s)).collect();
    let norm = (present.len() as f64).ln();
    let graph = knn_graph(emb, k.min(n - 1));
    let per_cell = par::map_range(n, |i| {
        let mut counts = vec![0.0; present.len()];
        for &j in &graph[i] {
            counts[slot[&batches[j]]] += 1.0;
        }
        let total = graph[i].len() as f64;
        -counts.iter().filter(|&&c| c > 0.0).map(|c| (c / total) * (c / total).ln()).sum::<f64>() / norm
    });
    Ok(per_cell.iter().sum::<f64>() / n as f64)
}

/// Most frequent label, lowest index on ties.
pub(crate) fn majority(labels: impl IntoIterator<Item = usize>) -> Option<usize> {
    let mut counts: Vec<usize> = Vec::new();
    for l in labels {
        if l >= counts.len() {
            counts.resize(l + 1, 0);
        }
        counts[l] += 1;
    }
    let best = *counts.iter().max()?;
    (best > 0).then(|| counts.iter().position(|&c| c == best).unwrap())
}

/// Accuracy of kNN classification of test cells from train cells.
pub fn label_transfer_accuracy(
    train_emb: ArrayView2<f64>,
    train_labels: &[usize],
    test_emb: ArrayView2<f64>,
    test_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if train_labels.len() != train_emb.nrows() || test_labels.len() != test_emb.nrows() {
        return Err(Error::Dimension("labels do not match embeddings".into()));
    }
    if train_emb.ncols() != test_emb.ncols() {
        return Err(Error::Dimension("train and test embeddings differ in width".into()));
    }
    if k == 0 || k > train_labels.len() {
        return Err(Error::InvalidArgument(format!("k={k} with {} training cells", train_labels.len())));
    }
    if test_labels.is_empty() {
        return Err(Error::InvalidArgument("empty test set".into()));
    }
    let neighbors = knn_query(train_emb, test_emb, k);
    let correct = neighbors
        .iter()
        .zip(test_labels)
        .filter(|(nb, &truth)| majority(nb.iter().map(|&j| train_labels[j])) == Some(truth))
        .count();
    Ok(correct as f64 / test_labels.len() as f64)
}

/// Area under the ROC curve with tied scores given midranks.
pub fn auroc(scores: &[f64], truth: &[bool]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::Dimension("scores and truth differ in length".into()));
    }
    let n_pos = truth.iter().filter(|&&t| t).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument("AUROC needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidArgument("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&c| truth[c]).count() as f64 * mid;
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// Recall of each class (None when the class has no true members).
pub fn per_class_recall(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<Vec<Option<f64>>> {
    if truth.len() != pred.len() {
        return Err(Error::Dimension("truth and predictions differ in length".into()));
    }
    let mut hit = vec![0usize; n_classes];
    let mut total = vec![0usize; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= n_classes {
            return Err(Error::InvalidArgument(format!("class {t} out of range ({n_classes})")));
        }
        total[t] += 1;
        hit[t] += usize::from(t == p);
    }
    Ok(hit.iter().zip(&total).map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64)).collect())
}
