//! Simplified Harmony: soft k-means with a batch-diversity penalty, then
//! per-cluster batch-mean correction.
//!
//! Cluster geometry is cosine: distances use L2-normalized embeddings and
//! centroids, so `σ` is on the scale of squared chord lengths (0 to 4).
//! Corrections move the embeddings in their original space.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;

use crate::cluster::plus_plus;
use crate::{rng_from_seed, Error, Result, Rng};

pub const DEFAULT_CLUSTERS: usize = 20;
pub const DEFAULT_SIGMA: f64 = 0.1;
pub const DEFAULT_LAMBDA_DIV: f64 = 1.0;
pub const DEFAULT_ROUNDS: usize = 10;

/// Assignment sweeps (centroid update plus block-wise reassignment) per
/// round.
const SWEEPS: usize = 5;
/// Cells are reassigned in this many blocks so the penalty sees the
/// effect of earlier blocks, as in the reference method.
const BLOCKS: usize = 10;
/// Soft counts below this get no batch-specific correction.
const MIN_SOFT_COUNT: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarmonyConfig {
    pub n_clusters: usize,
    pub lambda_div: f64,
    pub sigma: f64,
    pub rounds: usize,
    pub seed: u64,
}

impl Default for HarmonyConfig {
    fn default() -> Self {
        Self {
            n_clusters: DEFAULT_CLUSTERS,
            lambda_div: DEFAULT_LAMBDA_DIV,
            sigma: DEFAULT_SIGMA,
            rounds: DEFAULT_ROUNDS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct HarmonyState {
    /// Current (corrected) embeddings, cells × k.
    pub z: Array2<f64>,
    pub batches: Vec<usize>,
    pub n_batches: usize,
    /// Soft assignments, cells × K; rows sum to 1.
    pub r: Array2<f64>,
    /// Unit-norm centroids, K × k.
    pub centroids: Array2<f64>,
    pub lambda_div: f64,
    pub sigma: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HarmonyObjective {
    pub clustering: f64,
    pub diversity: f64,
    pub total: f64,
}

fn normalize_rows(z: ArrayView2<f64>) -> Array2<f64> {
    let mut out = z.to_owned();
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        if n > 0.0 {
            row /= n;
        }
    }
    out
}

impl HarmonyState {
    /// Centroids from k-means++ on the normalized embeddings; assignments
    /// from one unpenalized soft-assignment pass.
    pub fn new(z: ArrayView2<f64>, batches: &[usize], cfg: &HarmonyConfig) -> Result<Self> {
        let n = z.nrows();
        if batches.len() != n {
            return Err(Error::Dimension(format!("{} batch indices for {n} cells", batches.len())));
        }
        if n == 0 {
            return Err(Error::InvalidArgument("no cells".into()));
        }
        if cfg.n_clusters == 0 {
            return Err(Error::InvalidArgument("K must be >= 1".into()));
        }
        if !(cfg.sigma > 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be > 0, got {}", cfg.sigma)));
        }
        if !(cfg.lambda_div >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda_div must be >= 0, got {}", cfg.lambda_div)));
        }
        let k = cfg.n_clusters.min(n);
        let mut rng = rng_from_seed(cfg.seed);
        let zn = normalize_rows(z);
        let centroids = normalize_rows(plus_plus(zn.view(), k, &mut rng).view());
        let n_batches = batches.iter().max().unwrap() + 1;
        let mut state = Self {
            z: z.to_owned(),
            batches: batches.to_vec(),
            n_batches,
            r: Array2::from_elem((n, k), 1.0 / k as f64),
            centroids,
            lambda_div: cfg.lambda_div,
            sigma: cfg.sigma,
            iterations: 0,
        };
        let dist = state.distances(&zn);
        for i in 0..n {
            let row = Self::assignment_row(&dist, i, state.sigma, |_| 1.0);
            state.r.row_mut(i).assign(&row);
        }
        Ok(state)
    }

    pub fn n_clusters(&self) -> usize {
        self.centroids.nrows()
    }

    /// Squared distances between normalized cells and centroids.
    fn distances(&self, zn: &Array2<f64>) -> Array2<f64> {
        // both sides have unit norm, so ‖a − b‖² = 2 − 2 a·b (zero rows aside)
        let dots = zn.dot(&self.centroids.t());
        let norms: Array1<f64> = zn.rows().into_iter().map(|r| r.dot(&r)).collect();
        let cn: Array1<f64> = self.centroids.rows().into_iter().map(|r| r.dot(&r)).collect();
        Array2::from_shape_fn(dots.dim(), |(i, k)| (norms[i] + cn[k] - 2.0 * dots[[i, k]]).max(0.0))
    }

    fn assignment_row(dist: &Array2<f64>, i: usize, sigma: f64, penalty: impl Fn(usize) -> f64) -> Array1<f64> {
        let d = dist.row(i);
        let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut row: Array1<f64> = (0..d.len()).map(|k| (-(d[k] - min) / sigma).exp() * penalty(k)).collect();
        let s = row.sum();
        row /= s;
        row
    }

    /// Observed soft counts O (K × B) and counts expected under batch
    /// independence E.
    pub fn counts(&self) -> (Array2<f64>, Array2<f64>) {
        let k = self.n_clusters();
        let mut o = Array2::zeros((k, self.n_batches));
        for (i, &b) in self.batches.iter().enumerate() {
            let mut col = o.column_mut(b);
            col += &self.r.row(i);
        }
        let e = self.expected(&o);
        (o, e)
    }

    fn expected(&self, o: &Array2<f64>) -> Array2<f64> {
        let n = self.batches.len() as f64;
        let mut batch_frac = vec![0.0; self.n_batches];
        for &b in &self.batches {
            batch_frac[b] += 1.0;
        }
        batch_frac.iter_mut().for_each(|f| *f /= n);
        let sizes = o.sum_axis(Axis(1));
        Array2::from_shape_fn(o.dim(), |(k, b)| sizes[k] * batch_frac[b])
    }

    fn update_centroids(&mut self, zn: &Array2<f64>) {
        let c = self.r.t().dot(zn);
        self.centroids = normalize_rows(c.view());
    }

    /// Recomputes R with the diversity penalty `((E+1)/(O+1))^λ`, block by
    /// block in a seeded order so later blocks see updated counts.
    pub fn soft_assign(&mut self, rng: &mut Rng) {
        let zn = normalize_rows(self.z.view());
        let dist = self.distances(&zn);
        let n = self.batches.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let (mut o, _) = self.counts();
        let block = n.div_ceil(BLOCKS).max(1);
        for chunk in order.chunks(block) {
            // take the block out of the counts before reassigning it
            for &i in chunk {
                let mut col = o.column_mut(self.batches[i]);
                col -= &self.r.row(i);
            }
            o.mapv_inplace(|v| v.max(0.0));
            let e = self.expected_partial(&o, chunk);
            for &i in chunk {
                let b = self.batches[i];
                let lambda = self.lambda_div;
                let row = Self::assignment_row(&dist, i, self.sigma, |k| {
                    ((e[[k, b]] + 1.0) / (o[[k, b]] + 1.0)).powf(lambda)
                });
                self.r.row_mut(i).assign(&row);
            }
            for &i in chunk {
                let mut col = o.column_mut(self.batches[i]);
                col += &self.r.row(i);
            }
        }
        self.iterations += 1;
    }

    /// Expected counts for the cells outside `removed`, so that a single
    /// batch always gives E = O exactly.
    fn expected_partial(&self, o: &Array2<f64>, removed: &[usize]) -> Array2<f64> {
        let mut batch_n = vec![0.0; self.n_batches];
        for &b in &self.batches {
            batch_n[b] += 1.0;
        }
        for &i in removed {
            batch_n[self.batches[i]] -= 1.0;
        }
        let total: f64 = batch_n.iter().sum();
        let frac: Vec<f64> = batch_n.iter().map(|c| if total > 0.0 { c / total } else { 0.0 }).collect();
        let sizes = o.sum_axis(Axis(1));
        Array2::from_shape_fn(o.dim(), |(k, b)| sizes[k] * frac[b])
    }

    pub fn objective(&self) -> HarmonyObjective {
        let zn = normalize_rows(self.z.view());
        let dist = self.distances(&zn);
        let mut clustering = 0.0;
        for (r, d) in self.r.iter().zip(&dist) {
            clustering += r * d;
            if *r > 0.0 {
                clustering += self.sigma * r * r.ln();
            }
        }
        let (o, e) = self.counts();
        let diversity: f64 = o
            .iter()
            .zip(&e)
            .filter(|(o, _)| **o > 0.0)
            .map(|(o, e)| o * (o / e).ln())
            .sum();
        HarmonyObjective { clustering, diversity, total: clustering + self.lambda_div * diversity }
    }

    /// `z_i ← z_i − Σ_k R_ik (μ_{k,b(i)} − μ_k)` with soft means in the
    /// original space.
    pub fn correct(&mut self) {
        let (k, dim) = (self.n_clusters(), self.z.ncols());
        let b_n = self.n_batches;
        // per (cluster, batch) soft sums
        let mut sums = vec![Array2::<f64>::zeros((b_n, dim)); k];
        let mut o = Array2::<f64>::zeros((k, b_n));
        for (i, &b) in self.batches.iter().enumerate() {
            for c in 0..k {
                let w = self.r[[i, c]];
                sums[c].row_mut(b).scaled_add(w, &self.z.row(i));
                o[[c, b]] += w;
            }
        }
        let mut shift = vec![Array2::<f64>::zeros((b_n, dim)); k];
        for c in 0..k {
            let size: f64 = o.row(c).sum();
            if size < MIN_SOFT_COUNT {
                continue;
            }
            let mu = sums[c].sum_axis(Axis(0)) / size;
            for b in 0..b_n {
                if o[[c, b]] >= MIN_SOFT_COUNT {
                    let mu_b = &sums[c].row(b) / o[[c, b]];
                    shift[c].row_mut(b).assign(&(mu_b - &mu));
                }
            }
        }
        for (i, &b) in self.batches.iter().enumerate() {
            for c in 0..k {
                let w = self.r[[i, c]];
                let s = shift[c].row(b).to_owned();
                self.z.row_mut(i).scaled_add(-w, &s);
            }
        }
    }

    /// One round: assignment sweeps, then a correction.
    pub fn round(&mut self, rng: &mut Rng) {
        for _ in 0..SWEEPS {
            let zn = normalize_rows(self.z.view());
            self.update_centroids(&zn);
            self.soft_assign(rng);
        }
        self.correct();
    }
}

/// Alternates assignment and correction for `rounds` rounds.
pub fn run_harmony(z: ArrayView2<f64>, batches: &[usize], cfg: &HarmonyConfig) -> Result<Array2<f64>> {
    if cfg.rounds == 0 {
        return Err(Error::InvalidArgument("rounds must be >= 1".into()));
    }
    let mut state = HarmonyState::new(z, batches, cfg)?;
    let mut rng = rng_from_seed(cfg.seed.wrapping_add(1));
    for _ in 0..cfg.rounds {
        state.round(&mut rng);
    }
    if state.z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("harmony produced non-finite embeddings".into()));
    }
    Ok(state.z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::batch_entropy;
    use crate::synth::{gaussian_blobs, BlobConfig};
    use rand::Rng as _;

    fn random(seed: u64, n: usize, d: usize) -> Array2<f64> {
        let mut rng = rng_from_seed(seed);
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    fn cfg(k: usize) -> HarmonyConfig {
        HarmonyConfig { n_clusters: k, ..Default::default() }
    }

    #[test]
    fn rows_sum_to_one() {
        let z = random(1, 40, 5);
        let batches: Vec<usize> = (0..40).map(|i| i % 3).collect();
        let mut s = HarmonyState::new(z.view(), &batches, &cfg(4)).unwrap();
        let mut rng = rng_from_seed(0);
        for _ in 0..3 {
            s.soft_assign(&mut rng);
            for row in s.r.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
            assert!(s.objective().diversity >= -1e-12);
        }
    }

    #[test]
    fn penalty_vanishes_for_one_batch_or_zero_lambda() {
        let z = random(2, 30, 4);
        let single = vec![0; 30];
        let mut a = HarmonyState::new(z.view(), &single, &cfg(3)).unwrap();
        let mut plain = a.clone();
        plain.lambda_div = 0.0;
        a.soft_assign(&mut rng_from_seed(5));
        plain.soft_assign(&mut rng_from_seed(5));
        assert_eq!(a.r, plain.r);

        let two: Vec<usize> = (0..30).map(|i| i % 2).collect();
        let mut s = HarmonyState::new(z.view(), &two, &HarmonyConfig { lambda_div: 0.0, ..cfg(3) }).unwrap();
        let before = s.clone();
        s.soft_assign(&mut rng_from_seed(5));
        // without a penalty every cell gets the plain softmax of distances
        let zn = normalize_rows(before.z.view());
        let dist = before.distances(&zn);
        for i in 0..30 {
            let want = HarmonyState::assignment_row(&dist, i, before.sigma, |_| 1.0);
            assert_eq!(s.r.row(i), want);
        }
    }

    #[test]
    fn one_cluster_gives_ones() {
        let z = random(3, 10, 3);
        let batches: Vec<usize> = (0..10).map(|i| i % 2).collect();
        let mut s = HarmonyState::new(z.view(), &batches, &cfg(1)).unwrap();
        s.soft_assign(&mut rng_from_seed(1));
        assert!(s.r.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn objective_cases() {
        let z = random(4, 6, 3);
        let mut s = HarmonyState::new(z.view(), &[0, 1, 0, 1, 0, 1], &cfg(2)).unwrap();
        // perfectly mixed hard clusters
        s.r = Array2::from_shape_fn((6, 2), |(i, k)| if (i / 2) % 2 == k { 1.0 } else { 0.0 });
        s.r.row_mut(4).assign(&ndarray::array![0.5, 0.5]);
        s.r.row_mut(5).assign(&ndarray::array![0.5, 0.5]);
        assert!(s.objective().diversity.abs() < 1e-12);

        // one cell per cluster, centroid on the cell, hard assignments
        let z = random(5, 3, 4);
        let mut s = HarmonyState::new(z.view(), &[0, 1, 0], &cfg(3)).unwrap();
        s.centroids = normalize_rows(z.view());
        s.r = Array2::eye(3);
        assert!(s.objective().clustering.abs() < 1e-12);
        s.lambda_div = 0.0;
        let o = s.objective();
        assert_eq!(o.total, o.clustering);
    }

    #[test]
    fn identical_batches_need_no_correction() {
        let z = random(6, 8, 3);
        let mut doubled = Array2::zeros((16, 3));
        doubled.slice_mut(ndarray::s![..8, ..]).assign(&z);
        doubled.slice_mut(ndarray::s![8.., ..]).assign(&z);
        let batches: Vec<usize> = (0..16).map(|i| i / 8).collect();
        let mut s = HarmonyState::new(doubled.view(), &batches, &cfg(2)).unwrap();
        // give duplicates identical assignments
        for i in 0..8 {
            let row = s.r.row(i).to_owned();
            s.r.row_mut(i + 8).assign(&row);
        }
        s.correct();
        for (a, b) in s.z.iter().zip(&doubled) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_cluster_aligns_batch_means() {
        // two groups offset by v; with K = 1 the soft means are plain means
        let base = random(7, 20, 2);
        let v = ndarray::array![3.0, -1.0];
        let mut z = base.clone();
        for i in 10..20 {
            let mut row = z.row_mut(i);
            row += &v;
        }
        let batches: Vec<usize> = (0..20).map(|i| i / 10).collect();
        let mut s = HarmonyState::new(z.view(), &batches, &cfg(1)).unwrap();
        let m0 = z.slice(ndarray::s![..10, ..]).mean_axis(Axis(0)).unwrap();
        let m1 = z.slice(ndarray::s![10.., ..]).mean_axis(Axis(0)).unwrap();
        let global = z.mean_axis(Axis(0)).unwrap();
        s.correct();
        // oracle: batch 1 moves by −(m1 − global) = −(n0/n)(m1 − m0)
        let want_shift = -(&m1 - &m0) * 0.5;
        for i in 10..20 {
            for j in 0..2 {
                assert!((s.z[[i, j]] - z[[i, j]] - want_shift[j]).abs() < 1e-12);
            }
        }
        let c0 = s.z.slice(ndarray::s![..10, ..]).mean_axis(Axis(0)).unwrap();
        let c1 = s.z.slice(ndarray::s![10.., ..]).mean_axis(Axis(0)).unwrap();
        for j in 0..2 {
            assert!((c0[j] - global[j]).abs() < 1e-12 && (c1[j] - global[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn single_batch_is_fixed_point() {
        let z = random(8, 50, 4);
        let out = run_harmony(z.view(), &vec![0; 50], &cfg(5)).unwrap();
        for (a, b) in out.iter().zip(&z) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn mixes_offset_batches_deterministically() {
        let blobs = gaussian_blobs(&BlobConfig::default(), 3);
        let c = HarmonyConfig { seed: 1, ..Default::default() };
        let out = run_harmony(blobs.data.view(), &blobs.batches, &c).unwrap();
        let before = batch_entropy(blobs.data.view(), &blobs.batches, 15).unwrap();
        let after = batch_entropy(out.view(), &blobs.batches, 15).unwrap();
        assert!(after > before, "{before} -> {after}");
        assert_eq!(out, run_harmony(blobs.data.view(), &blobs.batches, &c).unwrap());
    }

    #[test]
    fn rejects_bad_sigma() {
        let z = random(9, 5, 2);
        assert!(HarmonyState::new(z.view(), &[0; 5], &HarmonyConfig { sigma: 0.0, ..cfg(2) }).is_err());
        assert!(run_harmony(z.view(), &[0; 5], &HarmonyConfig { rounds: 0, ..cfg(2) }).is_err());
    }
}
