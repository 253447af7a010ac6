//! Seeded k-means (k-means++ seeding, Lloyd iterations, best of several
//! restarts by inertia).

use ndarray::{Array2, ArrayView2};
use rand::Rng as _;

use crate::knn::sq_dist;
use crate::{rng_from_seed, Error, Result, Rng};

#[derive(Debug, Clone)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Array2<f64>,
    pub inertia: f64,
}

pub fn kmeans(points: ArrayView2<f64>, k: usize, n_init: usize, max_iter: usize, seed: u64) -> Result<KMeans> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!("k-means with k={k} on {n} points")));
    }
    let mut rng = rng_from_seed(seed);
    let mut best: Option<KMeans> = None;
    for _ in 0..n_init.max(1) {
        let run = lloyd(points, plus_plus(points, k, &mut rng), max_iter);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

/// k-means++ seeding.
pub(crate) fn plus_plus(points: ArrayView2<f64>, k: usize, rng: &mut Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::zeros((k, points.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), points.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), points.row(pick)));
        }
    }
    centroids
}

fn lloyd(points: ArrayView2<f64>, mut centroids: Array2<f64>, max_iter: usize) -> KMeans {
    let (n, dim) = points.dim();
    let k = centroids.nrows();
    let mut assignments = vec![usize::MAX; n];
    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        for (i, a) in assignments.iter_mut().enumerate() {
            let best = nearest_centroid(&centroids, points, i);
            if best != *a {
                *a = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            sums.row_mut(a).scaled_add(1.0, &points.row(i));
            counts[a] += 1;
        }
        for c in 0..k {
            // empty clusters keep their old centroid
            if counts[c] > 0 {
                centroids.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
    }
    let inertia = assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(points.row(i), centroids.row(a)))
        .sum();
    KMeans {
        assignments,
        centroids,
        inertia,
    }
}

fn nearest_centroid(centroids: &Array2<f64>, points: ArrayView2<f64>, i: usize) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (c, row) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(points.row(i), row);
        if d < best.0 {
            best = (d, c);
        }
    }
    best.1
}
