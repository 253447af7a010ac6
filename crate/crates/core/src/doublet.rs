//! Doublet simulation, neighbourhood scoring and calling.
//!
//! Synthetic doublets are built by summing the counts of two observed
//! cells. Observed and simulated profiles share one PCA space; the
//! fraction of simulated doublets among a cell's `k_adj` neighbours gives
//! `q`, which is turned into a posterior doublet probability `L_d` given
//! the expected doublet rate and the simulated-to-observed ratio.

use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::Rng as _;

use crate::io::ExpressionMatrix;
use crate::prep::{normalize_log1p, pca, select_hvg, DEFAULT_TARGET_SUM};
use crate::{knn, rng_from_seed, Error, Result};

pub const DEFAULT_PCA_DIMS: usize = 30;
pub const FALLBACK_THRESHOLD: f64 = 0.25;
const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct DoubletConfig {
    /// Expected doublet rate, in (0, 1).
    pub rho: f64,
    /// Simulated-to-observed ratio.
    pub r: f64,
    pub k: usize,
    pub pca_dims: usize,
    /// Genes used for the joint embedding (top HVGs of the observed data).
    pub n_genes: usize,
    pub target_sum: f64,
    pub seed: u64,
}

impl Default for DoubletConfig {
    fn default() -> Self {
        Self {
            rho: 0.06,
            r: 2.0,
            k: 20,
            pca_dims: DEFAULT_PCA_DIMS,
            n_genes: 2000,
            target_sum: DEFAULT_TARGET_SUM,
            seed: 0,
        }
    }
}

impl DoubletConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::InvalidArgument(format!("doublet rate must be in (0,1), got {}", self.rho)));
        }
        if !(self.r > 0.0) {
            return Err(Error::InvalidArgument(format!("simulation ratio must be positive, got {}", self.r)));
        }
        if self.k == 0 || self.k_adj() == 0 {
            return Err(Error::InvalidArgument("neighbour count must be at least 1".into()));
        }
        if self.pca_dims == 0 {
            return Err(Error::InvalidArgument("pca_dims must be at least 1".into()));
        }
        Ok(())
    }

    /// Neighbour count scaled to the enlarged observed + simulated set.
    pub fn k_adj(&self) -> usize {
        (self.k as f64 * (1.0 + self.r)).round() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DoubletScores {
    pub q: Vec<f64>,
    pub l_d: Vec<f64>,
    pub z: Vec<f64>,
    pub is_doublet: Vec<bool>,
    pub threshold: f64,
    pub k_adj: usize,
    /// `L_d` of the simulated doublets, used to place the threshold.
    pub simulated_l_d: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SimulatedDoublets {
    /// Normalized, log1p-transformed synthetic profiles.
    pub matrix: ExpressionMatrix,
    pub parents: Vec<(usize, usize)>,
}

/// Laplace-smoothed fraction of simulated neighbours.
pub fn neighbor_fraction(n_sim_neighbors: usize, k_adj: usize) -> f64 {
    (n_sim_neighbors as f64 + 1.0) / (k_adj as f64 + 2.0)
}

// 1 − ρ − q(1 − ρ − ρ/r), regrouped so that L_d(1) = 1 holds exactly
fn posterior_denominator(q: f64, rho: f64, r: f64) -> f64 {
    (1.0 - rho) * (1.0 - q) + q * (rho / r)
}

/// `L_d = (q ρ / r) / (1 − ρ − q (1 − ρ − ρ / r))`.
pub fn doublet_posterior(q: f64, rho: f64, r: f64) -> Result<f64> {
    let den = posterior_denominator(q, rho, r);
    if !(den > 0.0) {
        return Err(Error::Numerical(format!(
            "doublet posterior denominator {den} is not positive (q={q}, rho={rho}, r={r})"
        )));
    }
    Ok(q * (rho / r) / den)
}

/// `dL_d/dq = (ρ / r)(1 − ρ) / den²`.
pub fn doublet_posterior_slope(q: f64, rho: f64, r: f64) -> f64 {
    let den = posterior_denominator(q, rho, r);
    rho / r * (1.0 - rho) / (den * den)
}

/// Builds `round(r · n_cells)` synthetic doublets from the raw counts,
/// each from two distinct uniformly drawn cells, renormalized to
/// `target_sum` and log1p-transformed.
pub fn simulate_doublets(counts: &ExpressionMatrix, cfg: &DoubletConfig) -> Result<SimulatedDoublets> {
    let n = counts.n_cells();
    if n < 2 {
        return Err(Error::InvalidArgument("doublet simulation needs at least two cells".into()));
    }
    let n_sim = (cfg.r * n as f64).round() as usize;
    let mut rng = rng_from_seed(cfg.seed);
    let mut indptr = vec![0usize];
    let mut indices = Vec::new();
    let mut values = Vec::new();
    let mut parents = Vec::with_capacity(n_sim);
    let mut merged: Vec<(usize, f64)> = Vec::new();
    for _ in 0..n_sim {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        parents.push((a, b));
        merged.clear();
        let (ca, va) = counts.row(a);
        let (cb, vb) = counts.row(b);
        let (mut i, mut j) = (0, 0);
        while i < ca.len() || j < cb.len() {
            if j == cb.len() || (i < ca.len() && ca[i] < cb[j]) {
                merged.push((ca[i], va[i]));
                i += 1;
            } else if i == ca.len() || cb[j] < ca[i] {
                merged.push((cb[j], vb[j]));
                j += 1;
            } else {
                merged.push((ca[i], va[i] + vb[j]));
                i += 1;
                j += 1;
            }
        }
        for &(c, v) in &merged {
            indices.push(c);
            values.push(v);
        }
        indptr.push(indices.len());
    }
    let barcodes = (0..n_sim).map(|i| format!("sim{i:07}")).collect();
    let raw = ExpressionMatrix::from_csr(counts.n_genes(), indptr, indices, values, counts.gene_names().to_vec(), barcodes)?;
    Ok(SimulatedDoublets {
        matrix: normalize_log1p(&raw, cfg.target_sum)?,
        parents,
    })
}

/// Scores observed cells (and the simulated ones) from a joint kNN graph
/// over the concatenated embeddings, self excluded. Z and flags are left
/// unset; see [`call_doublets`].
pub fn doublet_scores(observed: ArrayView2<f64>, simulated: ArrayView2<f64>, cfg: &DoubletConfig) -> Result<DoubletScores> {
    cfg.validate()?;
    if observed.ncols() != simulated.ncols() {
        return Err(Error::Dimension(format!(
            "observed dim {} vs simulated dim {}",
            observed.ncols(),
            simulated.ncols()
        )));
    }
    let n_obs = observed.nrows();
    let joint = concatenate(Axis(0), &[observed, simulated]).expect("same width");
    let k_adj = cfg.k_adj();
    let graph = knn::knn_graph(joint.view(), k_adj);
    let mut q_all = Vec::with_capacity(joint.nrows());
    let mut l_all = Vec::with_capacity(joint.nrows());
    for neigh in &graph {
        let n_sim = neigh.iter().filter(|&&j| j >= n_obs).count();
        let q = neighbor_fraction(n_sim, k_adj);
        q_all.push(q);
        l_all.push(doublet_posterior(q, cfg.rho, cfg.r)?);
    }
    let simulated_l_d = l_all.split_off(n_obs);
    q_all.truncate(n_obs);
    Ok(DoubletScores {
        z: vec![0.0; n_obs],
        is_doublet: vec![false; n_obs],
        q: q_all,
        l_d: l_all,
        threshold: f64::NAN,
        k_adj,
        simulated_l_d,
    })
}

/// Fills Z-scores and flags against `threshold`. The standard error of
/// `L_d` is the binomial SE of `q` propagated through `dL_d/dq`; a zero SE
/// yields ±infinity (or 0 when the score sits on the threshold).
pub fn call_doublets(mut scores: DoubletScores, threshold: f64, cfg: &DoubletConfig) -> Result<DoubletScores> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold must be in (0,1), got {threshold}")));
    }
    let trials = scores.k_adj as f64 + 2.0;
    for i in 0..scores.q.len() {
        let (q, l) = (scores.q[i], scores.l_d[i]);
        let se_q = (q * (1.0 - q) / trials).max(0.0).sqrt();
        let se = doublet_posterior_slope(q, cfg.rho, cfg.r).abs() * se_q;
        let diff = l - threshold;
        scores.z[i] = if se > 0.0 {
            diff / se
        } else if diff > 0.0 {
            f64::INFINITY
        } else if diff < 0.0 {
            f64::NEG_INFINITY
        } else {
            0.0
        };
        scores.is_doublet[i] = l > threshold;
    }
    scores.threshold = threshold;
    Ok(scores)
}

/// Places the threshold in the valley between the two dominant modes of the
/// simulated-score histogram (50 bins on [0,1], 3-bin smoothing). A valley
/// only counts if it drops below half of the lower mode; otherwise the
/// distribution is treated as unimodal and 0.25 is returned.
pub fn auto_threshold(simulated: &[f64]) -> Result<f64> {
    if simulated.len() < 20 {
        return Err(Error::InvalidArgument(format!(
            "need at least 20 simulated scores, got {}",
            simulated.len()
        )));
    }
    let mut hist = [0.0f64; HISTOGRAM_BINS];
    for &s in simulated {
        let b = ((s.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
        hist[b] += 1.0;
    }
    let smooth: Vec<f64> = (0..HISTOGRAM_BINS)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(HISTOGRAM_BINS - 1);
            hist[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect();
    let peaks: Vec<usize> = (0..HISTOGRAM_BINS)
        .filter(|&i| {
            let left = if i == 0 { f64::NEG_INFINITY } else { smooth[i - 1] };
            let right = if i + 1 == HISTOGRAM_BINS { f64::NEG_INFINITY } else { smooth[i + 1] };
            smooth[i] > 0.0 && smooth[i] >= left && smooth[i] > right
        })
        .collect();

    let valley = |a: usize, b: usize| -> usize {
        let (lo, hi) = (a.min(b), a.max(b));
        (lo..=hi).min_by(|&x, &y| smooth[x].total_cmp(&smooth[y]).then(x.cmp(&y))).unwrap()
    };
    let mut by_height = peaks.clone();
    by_height.sort_by(|&a, &b| smooth[b].total_cmp(&smooth[a]).then(a.cmp(&b)));
    if let Some(&main) = by_height.first() {
        for &other in &by_height[1..] {
            let v = valley(main, other);
            if smooth[v] < 0.5 * smooth[other] {
                return Ok((v as f64 + 0.5) / HISTOGRAM_BINS as f64);
            }
        }
    }
    Ok(FALLBACK_THRESHOLD)
}

/// End-to-end scoring of raw counts: normalization, doublet simulation,
/// HVG restriction, joint PCA, kNN scoring, automatic threshold and calls.
/// `threshold` overrides the automatic choice.
pub fn detect_doublets(counts: &ExpressionMatrix, cfg: &DoubletConfig, threshold: Option<f64>) -> Result<DoubletScores> {
    cfg.validate()?;
    let observed = normalize_log1p(counts, cfg.target_sum)?;
    let sim = simulate_doublets(counts, cfg)?;
    let hvg = select_hvg(&observed, cfg.n_genes, crate::prep::DEFAULT_N_BINS)?;
    let genes = hvg.selected_ranked();
    let obs_dense = observed.dense_columns(&genes);
    let sim_dense = sim.matrix.dense_columns(&genes);
    let joint: Array2<f64> = concatenate(Axis(0), &[obs_dense.view(), sim_dense.view()]).expect("same width");
    let dims = cfg.pca_dims.min(joint.nrows()).min(joint.ncols());
    let (model, _) = pca(joint.view(), dims, cfg.seed)?;
    let obs_pc = model.transform(obs_dense.view());
    let sim_pc = model.transform(sim_dense.view());
    let scores = doublet_scores(obs_pc.view(), sim_pc.view(), cfg)?;
    let thr = match threshold {
        Some(t) => t,
        None => auto_threshold(&scores.simulated_l_d)?,
    };
    call_doublets(scores, thr, cfg)
}
