//! Exact brute-force k-nearest-neighbour search (squared Euclidean).
//! Ties are broken by the lower point index, so results are fully
//! deterministic. Batched searches screen with distances from a matrix
//! product, then rank every candidate within the rounding bound of that
//! expansion by its exact distance, so they agree with [`nearest`].

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::{s, Array1, ArrayView1, ArrayView2, Axis};

use crate::par;

#[derive(Clone, Copy, PartialEq)]
struct Cand {
    dist: f64,
    idx: usize,
}

impl Eq for Cand {}

impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist.total_cmp(&other.dist).then(self.idx.cmp(&other.idx))
    }
}

impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    match (a.as_slice(), b.as_slice()) {
        (Some(a), Some(b)) => sq_dist_slice(a, b),
        _ => a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum(),
    }
}

/// Eight independent partial sums so the loop vectorizes.
fn sq_dist_slice(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| (x - y) * (x - y)).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            let d = x[l] - y[l];
            acc[l] += d * d;
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// The `k` nearest rows of `points` to `query`, nearest first, skipping
/// index `exclude` when given.
pub fn nearest(points: ArrayView2<f64>, query: ArrayView1<f64>, k: usize, exclude: Option<usize>) -> Vec<usize> {
    if k == 0 {
        return Vec::new();
    }
    let mut heap: BinaryHeap<Cand> = BinaryHeap::with_capacity(k + 1);
    let points = points.as_standard_layout();
    let query = query.to_vec();
    let d = query.len();
    if d == 0 {
        return (0..points.nrows()).filter(|&i| Some(i) != exclude).take(k).collect();
    }
    let flat = points.as_slice().expect("standard layout");
    let rows = flat.chunks_exact(d);
    for (idx, row) in rows.enumerate() {
        if Some(idx) == exclude {
            continue;
        }
        let c = Cand {
            dist: sq_dist_slice(&query, row),
            idx,
        };
        if heap.len() < k {
            heap.push(c);
        } else if c < *heap.peek().unwrap() {
            heap.pop();
            heap.push(c);
        }
    }
    heap.into_sorted_vec().into_iter().map(|c| c.idx).collect()
}

/// kNN graph of `points` against itself with self excluded. Row `i` holds
/// the neighbours of point `i`, nearest first.
pub fn knn_graph(points: ArrayView2<f64>, k: usize) -> Vec<Vec<usize>> {
    batched(points, points, k, true)
}

/// kNN of every row of `queries` among `points`.
pub fn knn_query(points: ArrayView2<f64>, queries: ArrayView2<f64>, k: usize) -> Vec<Vec<usize>> {
    batched(points, queries, k, false)
}

const QUERY_BLOCK: usize = 128;

fn batched(points: ArrayView2<f64>, queries: ArrayView2<f64>, k: usize, exclude_self: bool) -> Vec<Vec<usize>> {
    let points = points.as_standard_layout();
    let queries = queries.as_standard_layout();
    let (n, d) = points.dim();
    if k == 0 || d == 0 || d != queries.ncols() {
        return (0..queries.nrows())
            .map(|i| nearest(points.view(), queries.row(i), k, exclude_self.then_some(i)))
            .collect();
    }
    let p_norm: Array1<f64> = points.map_axis(Axis(1), |r| r.dot(&r));
    let p_max = p_norm.iter().cloned().fold(0.0, f64::max);
    let n_blocks = queries.nrows().div_ceil(QUERY_BLOCK);
    let flat = points.as_slice().expect("standard layout");
    let blocks = par::map_range(n_blocks, |b| {
        let lo = b * QUERY_BLOCK;
        let hi = (lo + QUERY_BLOCK).min(queries.nrows());
        let qb = queries.slice(s![lo..hi, ..]);
        let gram = qb.dot(&points.t());
        let mut approx = vec![0.0; n];
        (lo..hi)
            .map(|qi| {
                let q = queries.row(qi);
                let q = q.as_slice().expect("standard layout");
                let q_norm: f64 = q.iter().map(|v| v * v).sum();
                let exclude = exclude_self.then_some(qi);
                let g = gram.row(qi - lo);
                for (j, a) in approx.iter_mut().enumerate() {
                    *a = if Some(j) == exclude { f64::INFINITY } else { q_norm + p_norm[j] - 2.0 * g[j] };
                }
                let kk = k.min(n - usize::from(exclude.is_some_and(|e| e < n)));
                if kk == 0 {
                    return Vec::new();
                }
                let mut sorted = approx.clone();
                let (_, kth, _) = sorted.select_nth_unstable_by(kk - 1, f64::total_cmp);
                // error of the expansion is a few ulps of the norms per term
                let err = 4.0 * (d + 2) as f64 * f64::EPSILON * (q_norm + p_max);
                let thr = *kth + 2.0 * err;
                if !thr.is_finite() {
                    return nearest(points.view(), queries.row(qi), k, exclude);
                }
                let mut cands: Vec<Cand> = approx
                    .iter()
                    .enumerate()
                    .filter(|&(j, &a)| a <= thr && Some(j) != exclude)
                    .map(|(j, _)| Cand {
                        dist: sq_dist_slice(q, &flat[j * d..(j + 1) * d]),
                        idx: j,
                    })
                    .collect();
                cands.sort_unstable();
                cands.truncate(kk);
                cands.into_iter().map(|c| c.idx).collect()
            })
            .collect::<Vec<_>>()
    });
    blocks.into_iter().flatten().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn ties_prefer_lower_index() {
        let pts = array![[0.0], [1.0], [-1.0], [2.0]];
        assert_eq!(nearest(pts.view(), array![0.0].view(), 2, Some(0)), vec![1, 2]);
        assert_eq!(nearest(pts.view(), array![0.0].view(), 3, None), vec![0, 1, 2]);
    }

    #[test]
    fn matches_full_sort() {
        use rand::Rng;
        let mut rng = crate::rng_from_seed(4);
        let pts = ndarray::Array2::from_shape_fn((60, 3), |_| rng.random_range(-1.0..1.0));
        let g = knn_graph(pts.view(), 5);
        for i in 0..60 {
            let mut all: Vec<(f64, usize)> = (0..60)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(pts.row(i), pts.row(j)), j))
                .collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let want: Vec<usize> = all[..5].iter().map(|p| p.1).collect();
            assert_eq!(g[i], want);
        }
    }

    #[test]
    fn k_larger_than_set() {
        let pts = array![[0.0], [1.0]];
        assert_eq!(nearest(pts.view(), array![0.2].view(), 5, None), vec![0, 1]);
    }

    #[test]
    fn batched_matches_single_query_under_cancellation() {
        use rand::Rng;
        let mut rng = crate::rng_from_seed(8);
        // far from the origin, with duplicated rows, across several blocks
        let mut pts = ndarray::Array2::from_shape_fn((300, 4), |_| 1e4 + rng.random_range(-1e-3..1e-3));
        for i in (0..300).step_by(7) {
            let src = pts.row(i / 2).to_owned();
            pts.row_mut(i).assign(&src);
        }
        let g = knn_graph(pts.view(), 6);
        let q = knn_query(pts.view(), pts.slice(ndarray::s![..50, ..]), 6);
        for i in 0..300 {
            assert_eq!(g[i], nearest(pts.view(), pts.row(i), 6, Some(i)), "row {i}");
        }
        for i in 0..50 {
            assert_eq!(q[i], nearest(pts.view(), pts.row(i), 6, None));
        }
    }
}
