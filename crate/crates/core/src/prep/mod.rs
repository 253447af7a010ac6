//! QC metrics, cell filtering, normalization, HVG selection, PCA and the
//! top-expressed-gene report.

mod hvg;
mod pca;

pub use hvg::{select_hvg, HvgReport, DEFAULT_N_BINS, DEFAULT_N_TOP};
pub use pca::{pca, PcaModel};

use crate::io::{CellTable, ExpressionMatrix, QcMetrics};
use crate::{Error, Result};

pub const DEFAULT_TARGET_SUM: f64 = 10_000.0;
pub const DEFAULT_MIN_GENES: usize = 200;
pub const DEFAULT_MAX_PCT_MT: f64 = 20.0;

pub fn is_mito(gene: &str) -> bool {
    gene.starts_with("MT-")
}

pub fn is_ribo(gene: &str) -> bool {
    gene.starts_with("RPS") || gene.starts_with("RPL")
}

/// Per-cell detected genes, total counts and mito/ribo percentages.
pub fn compute_qc(x: &ExpressionMatrix) -> Vec<QcMetrics> {
    let mito: Vec<bool> = x.gene_names().iter().map(|g| is_mito(g)).collect();
    let ribo: Vec<bool> = x.gene_names().iter().map(|g| is_ribo(g)).collect();
    (0..x.n_cells())
        .map(|r| {
            let (cols, vals) = x.row(r);
            let mut q = QcMetrics::default();
            let (mut mt, mut rb) = (0.0, 0.0);
            for (&c, &v) in cols.iter().zip(vals) {
                if v > 0.0 {
                    q.n_genes_by_counts += 1;
                }
                q.total_counts += v;
                if mito[c] {
                    mt += v;
                }
                if ribo[c] {
                    rb += v;
                }
            }
            if q.total_counts > 0.0 {
                q.pct_counts_mt = 100.0 * mt / q.total_counts;
                q.pct_counts_ribo = 100.0 * rb / q.total_counts;
            }
            q
        })
        .collect()
}

/// Keeps cells with at least `min_genes` detected genes and at most
/// `max_pct_mt` mitochondrial percentage. `cells.qc` must be filled.
pub fn filter_cells(
    x: &ExpressionMatrix,
    cells: &CellTable,
    min_genes: usize,
    max_pct_mt: f64,
) -> Result<(ExpressionMatrix, CellTable)> {
    if max_pct_mt < 0.0 {
        return Err(Error::InvalidArgument("max_pct_mt must be nonnegative".into()));
    }
    if cells.len() != x.n_cells() {
        return Err(Error::Dimension(format!("{} metadata rows for {} cells", cells.len(), x.n_cells())));
    }
    let keep: Vec<bool> = cells
        .qc
        .iter()
        .map(|q| q.n_genes_by_counts >= min_genes && q.pct_counts_mt <= max_pct_mt)
        .collect();
    if !keep.iter().any(|&k| k) {
        return Err(Error::EmptyResult);
    }
    let mut kept = cells.select(&keep);
    kept.compact();
    Ok((x.select_cells(&keep)?, kept))
}

/// Scales each cell to `target_sum` total counts and applies `ln(1 + v)`.
/// All-zero cells stay all-zero.
pub fn normalize_log1p(x: &ExpressionMatrix, target_sum: f64) -> Result<ExpressionMatrix> {
    if !(target_sum > 0.0) {
        return Err(Error::InvalidArgument(format!("target_sum must be positive, got {target_sum}")));
    }
    let mut values = Vec::with_capacity(x.nnz());
    for r in 0..x.n_cells() {
        let total = x.row_sum(r);
        let scale = if total > 0.0 { target_sum / total } else { 0.0 };
        values.extend(x.row(r).1.iter().map(|v| (v * scale).ln_1p()));
    }
    x.with_values(values)
}

/// The `n` genes with the largest share of all counts, as percentages,
/// largest first (ties by gene order).
pub fn top_expressed(x: &ExpressionMatrix, n: usize) -> Vec<(String, f64)> {
    let mut totals = vec![0.0; x.n_genes()];
    for r in 0..x.n_cells() {
        let (cols, vals) = x.row(r);
        for (&c, &v) in cols.iter().zip(vals) {
            totals[c] += v;
        }
    }
    let grand: f64 = totals.iter().sum();
    let mut order: Vec<usize> = (0..x.n_genes()).collect();
    order.sort_by(|&a, &b| totals[b].total_cmp(&totals[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(n)
        .map(|g| {
            let pct = if grand > 0.0 { 100.0 * totals[g] / grand } else { 0.0 };
            (x.gene_names()[g].clone(), pct)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn mat(dense: Array2<f64>, genes: &[&str]) -> ExpressionMatrix {
        let barcodes = (0..dense.nrows()).map(|i| format!("c{i}")).collect();
        ExpressionMatrix::from_dense(&dense, genes.iter().map(|s| s.to_string()).collect(), barcodes).unwrap()
    }

    #[test]
    fn qc_percentages() {
        let x = mat(array![[5.0, 5.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 4.0]], &["ACTB", "MT-CO1", "RPL3"]);
        let q = compute_qc(&x);
        assert_eq!(q[0].total_counts, 10.0);
        assert_eq!(q[0].n_genes_by_counts, 2);
        assert_eq!(q[0].pct_counts_mt, 50.0);
        assert_eq!(q[1], QcMetrics::default());
        assert_eq!(q[2].pct_counts_ribo, 100.0);
    }

    #[test]
    fn qc_totals_sum_to_grand_total() {
        let x = mat(array![[1.0, 2.0, 0.0], [3.0, 0.0, 7.0]], &["A", "B", "C"]);
        let s: f64 = compute_qc(&x).iter().map(|q| q.total_counts).sum();
        assert_eq!(s, x.total());
    }

    fn with_qc(x: &ExpressionMatrix) -> CellTable {
        let mut t = CellTable::single_batch(x.barcodes().to_vec());
        t.qc = compute_qc(x);
        t
    }

    #[test]
    fn filter_identity_and_removal() {
        let x = mat(array![[5.0, 5.0], [9.0, 1.0]], &["ACTB", "MT-CO1"]);
        let t = with_qc(&x);
        let (x2, t2) = filter_cells(&x, &t, 0, 100.0).unwrap();
        assert_eq!(x2, x);
        assert_eq!(t2.barcodes, t.barcodes);
        let (x3, t3) = filter_cells(&x, &t, 0, 20.0).unwrap();
        assert_eq!(x3.n_cells(), 1);
        assert_eq!(t3.barcodes, vec!["c1"]);
        assert!(matches!(filter_cells(&x, &t, 5, 100.0), Err(Error::EmptyResult)));
    }

    #[test]
    fn normalize_examples() {
        let x = mat(array![[2.0, 2.0], [0.0, 0.0]], &["A", "B"]);
        let n = normalize_log1p(&x, 4.0).unwrap().to_dense();
        assert!(n.row(0).iter().all(|v| (v - 3f64.ln()).abs() < 1e-15));
        assert_eq!(n.row(1).to_vec(), vec![0.0, 0.0]);
        let x = mat(array![[10.0]], &["A"]);
        assert!((normalize_log1p(&x, 10.0).unwrap().to_dense()[[0, 0]] - 11f64.ln()).abs() < 1e-15);
        assert!(normalize_log1p(&x, 0.0).is_err());
    }

    #[test]
    fn normalize_preserves_proportions() {
        let x = mat(array![[1.0, 3.0, 6.0], [17.0, 0.0, 2.0]], &["A", "B", "C"]);
        let n = normalize_log1p(&x, 1e4).unwrap().to_dense();
        let dense = x.to_dense();
        for r in 0..2 {
            let back: Vec<f64> = n.row(r).iter().map(|v| v.exp_m1()).collect();
            let s: f64 = back.iter().sum();
            let t: f64 = dense.row(r).sum();
            for (b, o) in back.iter().zip(dense.row(r)) {
                assert!((b / s - o / t).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn top_expressed_examples() {
        let x = mat(array![[3.0, 7.0], [3.0, 0.0]], &["ACTB", "GAPDH"]);
        let t = top_expressed(&x, 5);
        assert_eq!(t.len(), 2);
        assert_eq!(t[0], ("GAPDH".to_string(), 7.0 / 13.0 * 100.0));
        let x = mat(array![[3.0, 7.0]], &["ACTB", "OTHER"]);
        let x2 = mat(array![[30.0, 70.0]], &["ACTB", "OTHER"]);
        assert_eq!(top_expressed(&x, 1)[0].1, top_expressed(&x2, 1)[0].1);
        let single = mat(array![[4.0], [2.0]], &["ONLY"]);
        assert_eq!(top_expressed(&single, 1), vec![("ONLY".to_string(), 100.0)]);
    }

    #[test]
    fn actb_holds_thirty_percent() {
        // ACTB 30 of 100 counts
        let x = mat(array![[20.0, 10.0, 5.0, 15.0], [10.0, 20.0, 15.0, 5.0]], &["ACTB", "GAPDH", "B2M", "HLA-A"]);
        let t = top_expressed(&x, 20);
        assert_eq!(t[0].0, "ACTB");
        assert!((t[0].1 - 30.0).abs() < 1e-12);
        assert!(t.iter().map(|p| p.1).sum::<f64>() <= 100.0 + 1e-9);
    }
}
