//! Seeded synthetic data generators used by the tests, the CLI's
//! `[data.synthetic]` source and the browser demo.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, LogNormal, Poisson, StandardNormal};

use crate::io::{CellTable, ExpressionMatrix};
use crate::{rng_from_seed, Result, Rng};

/// Gaussian class blobs with additive per-batch offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobConfig {
    pub n_cells: usize,
    pub dim: usize,
    pub n_classes: usize,
    pub n_batches: usize,
    /// Distance between any two class means.
    pub class_separation: f64,
    pub within_sd: f64,
    /// Norm of the offset between consecutive batches.
    pub batch_offset: f64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        Self {
            n_cells: 600,
            dim: 20,
            n_classes: 3,
            n_batches: 2,
            class_separation: 6.0,
            within_sd: 1.0,
            batch_offset: 4.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Blobs {
    pub data: Array2<f64>,
    pub classes: Vec<usize>,
    pub batches: Vec<usize>,
}

impl Blobs {
    pub fn cell_table(&self) -> CellTable {
        let barcodes = (0..self.data.nrows()).map(|i| format!("cell{i:05}")).collect();
        let batch_names: Vec<String> = self.batches.iter().map(|b| format!("batch{b}")).collect();
        let label_names: Vec<String> = self.classes.iter().map(|c| format!("type{c}")).collect();
        let b: Vec<&str> = batch_names.iter().map(String::as_str).collect();
        let l: Vec<Option<&str>> = label_names.iter().map(|s| Some(s.as_str())).collect();
        CellTable::from_names(barcodes, &b, Some(&l))
    }
}

/// Class means sit on scaled coordinate axes, so every pair is exactly
/// `class_separation` apart; the batch offset points in a seeded random
/// direction.
pub fn gaussian_blobs(cfg: &BlobConfig, seed: u64) -> Blobs {
    assert!(cfg.n_classes <= cfg.dim, "one axis per class mean");
    let mut rng = rng_from_seed(seed);
    let scale = cfg.class_separation / std::f64::consts::SQRT_2;
    let mut direction: Array1<f64> = Array1::from_shape_fn(cfg.dim, |_| StandardNormal.sample(&mut rng));
    direction /= direction.dot(&direction).sqrt();
    let offset = direction * cfg.batch_offset;

    let mut classes: Vec<usize> = (0..cfg.n_cells).map(|i| i % cfg.n_classes).collect();
    let mut batches: Vec<usize> = (0..cfg.n_cells).map(|i| (i / cfg.n_classes) % cfg.n_batches).collect();
    let mut order: Vec<usize> = (0..cfg.n_cells).collect();
    order.shuffle(&mut rng);
    classes = order.iter().map(|&i| classes[i]).collect();
    batches = order.iter().map(|&i| batches[i]).collect();

    let mut data = Array2::zeros((cfg.n_cells, cfg.dim));
    for i in 0..cfg.n_cells {
        let mut row = data.row_mut(i);
        for v in row.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = cfg.within_sd * z;
        }
        row[classes[i]] += scale;
        row.scaled_add(batches[i] as f64, &offset);
    }
    Blobs { data, classes, batches }
}

/// Negative-binomial draw via the gamma-Poisson mixture. `size` is the NB
/// shape; smaller means more overdispersed.
pub fn negative_binomial(rng: &mut Rng, mean: f64, size: f64) -> f64 {
    if mean <= 0.0 {
        return 0.0;
    }
    let lambda = Gamma::new(size, mean / size).expect("positive NB parameters").sample(rng);
    if lambda < 1e-12 {
        return 0.0;
    }
    Poisson::new(lambda).expect("positive rate").sample(rng)
}

fn gene_names(n_genes: usize) -> Vec<String> {
    const NAMED: [&str; 8] = ["ACTB", "GAPDH", "MT-CO1", "MT-ND1", "RPL3", "RPS6", "HLA-A", "B2M"];
    (0..n_genes)
        .map(|g| NAMED.get(g).map(|s| s.to_string()).unwrap_or_else(|| format!("GENE{g:05}")))
        .collect()
}

fn barcodes(n: usize, prefix: &str) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i:06}")).collect()
}

/// Counts where `n_planted` genes draw from a far more overdispersed NB
/// than the rest at the same mean. Returns the matrix and the planted
/// gene indices.
pub fn planted_hvg_counts(n_cells: usize, n_genes: usize, n_planted: usize, seed: u64) -> (ExpressionMatrix, Vec<usize>) {
    let mut rng = rng_from_seed(seed);
    let base = LogNormal::new(0.0, 1.0).unwrap();
    let means: Vec<f64> = (0..n_genes).map(|_| base.sample(&mut rng)).collect();
    let mut genes: Vec<usize> = (0..n_genes).collect();
    genes.shuffle(&mut rng);
    let mut planted: Vec<usize> = genes[..n_planted].to_vec();
    planted.sort_unstable();
    let mut is_planted = vec![false; n_genes];
    for &g in &planted {
        is_planted[g] = true;
    }
    let size_factor = LogNormal::new(0.0, 0.2).unwrap();
    let mut dense = Array2::zeros((n_cells, n_genes));
    for i in 0..n_cells {
        let s = size_factor.sample(&mut rng);
        for g in 0..n_genes {
            let size = if is_planted[g] { 0.1 } else { 20.0 };
            dense[[i, g]] = negative_binomial(&mut rng, means[g] * s, size);
        }
    }
    let x = ExpressionMatrix::from_dense(&dense, gene_names(n_genes), barcodes(n_cells, "cell")).unwrap();
    (x, planted)
}

/// Cell types with distinct marker programs, optional multiplicative batch
/// effects, and NB sampling noise.
#[derive(Debug, Clone, PartialEq)]
pub struct CountsConfig {
    pub n_cells: usize,
    pub n_genes: usize,
    pub n_types: usize,
    pub n_batches: usize,
    /// Fraction of genes that are markers of each type.
    pub marker_fraction: f64,
    pub marker_fold: f64,
    /// Log-scale sd of the per-(batch, gene) multiplicative effect.
    pub batch_effect_sd: f64,
    pub nb_size: f64,
    /// Mean library scale; per-gene means are multiplied by it.
    pub depth: f64,
}

impl Default for CountsConfig {
    fn default() -> Self {
        Self {
            n_cells: 1000,
            n_genes: 500,
            n_types: 3,
            n_batches: 2,
            marker_fraction: 0.05,
            marker_fold: 6.0,
            batch_effect_sd: 0.5,
            nb_size: 5.0,
            depth: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CountsDataset {
    pub matrix: ExpressionMatrix,
    pub cells: CellTable,
    pub types: Vec<usize>,
}

pub fn cell_type_counts(cfg: &CountsConfig, seed: u64) -> CountsDataset {
    let mut rng = rng_from_seed(seed);
    let (n, g) = (cfg.n_cells, cfg.n_genes);
    let base = LogNormal::new(-0.5, 1.2).unwrap();
    let base_means: Vec<f64> = (0..g).map(|_| base.sample(&mut rng) * cfg.depth).collect();
    let mut profiles = Array2::from_shape_fn((cfg.n_types, g), |(_, j)| base_means[j]);
    let n_markers = ((cfg.marker_fraction * g as f64).round() as usize).max(1);
    for t in 0..cfg.n_types {
        let mut genes: Vec<usize> = (8..g).collect();
        genes.shuffle(&mut rng);
        for &j in genes.iter().take(n_markers) {
            profiles[[t, j]] *= cfg.marker_fold;
        }
    }
    let batch_effect = LogNormal::new(0.0, cfg.batch_effect_sd.max(1e-12)).unwrap();
    let effects = Array2::from_shape_fn((cfg.n_batches, g), |(b, _)| {
        let e = batch_effect.sample(&mut rng);
        if b == 0 || cfg.batch_effect_sd == 0.0 { 1.0 } else { e }
    });
    let size_factor = LogNormal::new(0.0, 0.25).unwrap();

    let types: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.n_types)).collect();
    let batches: Vec<usize> = (0..n).map(|_| rng.random_range(0..cfg.n_batches)).collect();
    let mut dense = Array2::zeros((n, g));
    for i in 0..n {
        let s = size_factor.sample(&mut rng);
        for j in 0..g {
            let mean = profiles[[types[i], j]] * effects[[batches[i], j]] * s;
            dense[[i, j]] = negative_binomial(&mut rng, mean, cfg.nb_size);
        }
    }
    let codes = barcodes(n, "cell");
    let matrix = ExpressionMatrix::from_dense(&dense, gene_names(g), codes.clone()).unwrap();
    let batch_names: Vec<String> = batches.iter().map(|b| format!("batch{b}")).collect();
    let type_names: Vec<String> = types.iter().map(|t| format!("type{t}")).collect();
    let b: Vec<&str> = batch_names.iter().map(String::as_str).collect();
    let l: Vec<Option<&str>> = type_names.iter().map(|s| Some(s.as_str())).collect();
    let cells = CellTable::from_names(codes, &b, Some(&l));
    CountsDataset { matrix, cells, types }
}

/// Appends `n_doublets` rows, each the count sum of two cells of different
/// types. Returns the combined matrix and the ground-truth doublet flags.
pub fn add_sum_doublets(
    x: &ExpressionMatrix,
    types: &[usize],
    n_doublets: usize,
    seed: u64,
) -> Result<(ExpressionMatrix, Vec<bool>)> {
    let mut rng = rng_from_seed(seed);
    let dense = x.to_dense();
    let n = x.n_cells();
    let mut rows = Array2::zeros((n_doublets, x.n_genes()));
    for d in 0..n_doublets {
        let a = rng.random_range(0..n);
        let b = loop {
            let b = rng.random_range(0..n);
            if types[b] != types[a] {
                break b;
            }
        };
        rows.row_mut(d).assign(&(&dense.row(a) + &dense.row(b)));
    }
    let extra = ExpressionMatrix::from_dense(&rows, x.gene_names().to_vec(), barcodes(n_doublets, "dbl"))?;
    let mut truth = vec![false; n];
    truth.extend(std::iter::repeat_n(true, n_doublets));
    Ok((x.vstack(&extra)?, truth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blobs_have_requested_geometry() {
        let b = gaussian_blobs(&BlobConfig::default(), 3);
        assert_eq!(b.data.dim(), (600, 20));
        assert_eq!(b.classes.iter().filter(|&&c| c == 2).count(), 200);
        assert_eq!(b.batches.iter().filter(|&&c| c == 1).count(), 300);
    }

    #[test]
    fn nb_mean_is_close() {
        let mut rng = rng_from_seed(0);
        let m: f64 = (0..20000).map(|_| negative_binomial(&mut rng, 3.0, 2.0)).sum::<f64>() / 20000.0;
        assert!((m - 3.0).abs() < 0.1, "{m}");
    }

    #[test]
    fn doublets_are_heterotypic_sums() {
        let ds = cell_type_counts(&CountsConfig { n_cells: 30, n_genes: 40, ..Default::default() }, 1);
        let (x, truth) = add_sum_doublets(&ds.matrix, &ds.types, 5, 2).unwrap();
        assert_eq!(x.n_cells(), 35);
        assert_eq!(truth.iter().filter(|&&t| t).count(), 5);
    }
}
