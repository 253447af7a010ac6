use crate::io::ExpressionMatrix;
use crate::{Error, Result};

pub const DEFAULT_N_TOP: usize = 2000;
pub const DEFAULT_N_BINS: usize = 20;

/// Mean-binned normalized dispersion per gene.
#[derive(Debug, Clone, PartialEq)]
pub struct HvgReport {
    pub means: Vec<f64>,
    pub dispersions: Vec<f64>,
    pub bins: Vec<usize>,
    pub z_scores: Vec<f64>,
    pub selected: Vec<bool>,
}

impl HvgReport {
    /// Gene indices ordered by z-scored dispersion, largest first, ties by
    /// lower index.
    pub fn ranked(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.z_scores.len()).collect();
        order.sort_by(|&a, &b| self.z_scores[b].total_cmp(&self.z_scores[a]).then(a.cmp(&b)));
        order
    }

    /// Selected genes in rank order.
    pub fn selected_ranked(&self) -> Vec<usize> {
        self.ranked().into_iter().filter(|&g| self.selected[g]).collect()
    }
}

/// Selects the `n_top` genes with the highest dispersion (variance / mean
/// of the normalized values) after z-scoring within `n_bins`
/// equal-occupancy bins of mean expression.
pub fn select_hvg(xnorm: &ExpressionMatrix, n_top: usize, n_bins: usize) -> Result<HvgReport> {
    if n_top == 0 || n_bins == 0 {
        return Err(Error::InvalidArgument("n_top and n_bins must be at least 1".into()));
    }
    let (n, g) = (xnorm.n_cells(), xnorm.n_genes());
    let mut sum = vec![0.0; g];
    let mut sumsq = vec![0.0; g];
    for r in 0..n {
        let (cols, vals) = xnorm.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            sum[c] += v;
            sumsq[c] += v * v;
        }
    }
    let means: Vec<f64> = sum.iter().map(|s| s / n.max(1) as f64).collect();
    let dispersions: Vec<f64> = (0..g)
        .map(|j| {
            if means[j] <= 0.0 || n < 2 {
                return 0.0;
            }
            let var = ((sumsq[j] - n as f64 * means[j] * means[j]) / (n - 1) as f64).max(0.0);
            var / means[j]
        })
        .collect();

    let mut by_mean: Vec<usize> = (0..g).collect();
    by_mean.sort_by(|&a, &b| means[a].total_cmp(&means[b]).then(a.cmp(&b)));
    let mut bins = vec![0usize; g];
    for (rank, &j) in by_mean.iter().enumerate() {
        bins[j] = rank * n_bins / g;
    }

    let mut z_scores = vec![0.0; g];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_bins];
    for j in 0..g {
        members[bins[j]].push(j);
    }
    for genes in members.iter().filter(|m| m.len() > 1) {
        let m = genes.len() as f64;
        let mu = genes.iter().map(|&j| dispersions[j]).sum::<f64>() / m;
        let var = genes.iter().map(|&j| (dispersions[j] - mu).powi(2)).sum::<f64>() / (m - 1.0);
        let sd = var.sqrt();
        // spread at rounding level means the bin is flat
        if sd > 1e-12 * mu.abs().max(f64::MIN_POSITIVE) {
            for &j in genes {
                z_scores[j] = (dispersions[j] - mu) / sd;
            }
        }
    }

    let mut report = HvgReport {
        means,
        dispersions,
        bins,
        z_scores,
        selected: vec![false; g],
    };
    for j in report.ranked().into_iter().take(n_top) {
        report.selected[j] = true;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn mat(dense: Array2<f64>) -> ExpressionMatrix {
        let genes = (0..dense.ncols()).map(|i| format!("g{i}")).collect();
        let cells = (0..dense.nrows()).map(|i| format!("c{i}")).collect();
        ExpressionMatrix::from_dense(&dense, genes, cells).unwrap()
    }

    #[test]
    fn identical_genes_select_by_index() {
        let x = mat(Array2::from_shape_fn((6, 5), |(i, _)| (i % 3) as f64));
        let r = select_hvg(&x, 2, 2).unwrap();
        assert!(r.z_scores.iter().all(|&z| z == 0.0));
        assert_eq!(r.selected, vec![true, true, false, false, false]);
    }

    #[test]
    fn n_top_beyond_gene_count() {
        let x = mat(Array2::from_shape_fn((4, 3), |(i, j)| (i * j) as f64));
        let r = select_hvg(&x, 10, 20).unwrap();
        assert!(r.selected.iter().all(|&s| s));
    }

    #[test]
    fn zero_mean_gene_has_zero_dispersion() {
        let x = mat(Array2::from_shape_fn((4, 2), |(i, j)| if j == 0 { 0.0 } else { i as f64 }));
        let r = select_hvg(&x, 1, 1).unwrap();
        assert_eq!(r.dispersions[0], 0.0);
        assert!(r.selected[1]);
    }

    #[test]
    fn bins_have_equal_occupancy() {
        let x = mat(Array2::from_shape_fn((5, 40), |(i, j)| ((i + 1) * (j + 1) % 7) as f64));
        let r = select_hvg(&x, 5, 4).unwrap();
        for b in 0..4 {
            assert_eq!(r.bins.iter().filter(|&&x| x == b).count(), 10);
        }
        assert_eq!(r.selected.iter().filter(|&&s| s).count(), 5);
    }
}
