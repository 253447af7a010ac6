use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use super::{open_lines, read_names};
use crate::{Error, Result};

/// How the rows of a MatrixMarket file map onto cells and genes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Orientation {
    /// Rows are genes, columns are cells (the usual public-data layout).
    #[default]
    GenesByCells,
    CellsByGenes,
}

/// Sparse cells x genes count matrix in CSR layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    n_cells: usize,
    n_genes: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
    gene_names: Vec<String>,
    barcodes: Vec<String>,
}

impl ExpressionMatrix {
    /// Builds a matrix from CSR parts, checking every structural invariant.
    pub fn from_csr(
        n_genes: usize,
        indptr: Vec<usize>,
        indices: Vec<usize>,
        values: Vec<f64>,
        gene_names: Vec<String>,
        barcodes: Vec<String>,
    ) -> Result<Self> {
        let dim = |msg: String| Err(Error::Dimension(msg));
        if indptr.is_empty() {
            return dim("row offsets must have at least one entry".into());
        }
        let n_cells = indptr.len() - 1;
        if indptr[0] != 0 || *indptr.last().unwrap() != indices.len() || indices.len() != values.len() {
            return dim("row offsets do not cover the stored entries".into());
        }
        if indptr.windows(2).any(|w| w[0] > w[1]) {
            return dim("row offsets decrease".into());
        }
        for r in 0..n_cells {
            let cols = &indices[indptr[r]..indptr[r + 1]];
            if cols.windows(2).any(|w| w[0] >= w[1]) || cols.last().is_some_and(|&c| c >= n_genes) {
                return dim(format!("row {r}: column indices unsorted or out of range"));
            }
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument("counts must be finite and nonnegative".into()));
        }
        if gene_names.len() != n_genes {
            return dim(format!("{} gene names for {} genes", gene_names.len(), n_genes));
        }
        if barcodes.len() != n_cells {
            return dim(format!("{} barcodes for {} cells", barcodes.len(), n_cells));
        }
        check_unique(&gene_names, "gene name")?;
        check_unique(&barcodes, "barcode")?;
        Ok(Self {
            n_cells,
            n_genes,
            indptr,
            indices,
            values,
            gene_names,
            barcodes,
        })
    }

    /// Builds from a dense row-major cells x genes array, dropping zeros.
    pub fn from_dense(dense: &Array2<f64>, gene_names: Vec<String>, barcodes: Vec<String>) -> Result<Self> {
        let (n_cells, n_genes) = dense.dim();
        let mut indptr = Vec::with_capacity(n_cells + 1);
        let mut indices = Vec::new();
        let mut values = Vec::new();
        indptr.push(0);
        for row in dense.rows() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    indices.push(j);
                    values.push(v);
                }
            }
            indptr.push(indices.len());
        }
        Self::from_csr(n_genes, indptr, indices, values, gene_names, barcodes)
    }

    pub fn n_cells(&self) -> usize {
        self.n_cells
    }

    pub fn n_genes(&self) -> usize {
        self.n_genes
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn gene_names(&self) -> &[String] {
        &self.gene_names
    }

    pub fn barcodes(&self) -> &[String] {
        &self.barcodes
    }

    pub fn indptr(&self) -> &[usize] {
        &self.indptr
    }

    /// Column indices and values of one cell.
    pub fn row(&self, cell: usize) -> (&[usize], &[f64]) {
        let span = self.indptr[cell]..self.indptr[cell + 1];
        (&self.indices[span.clone()], &self.values[span])
    }

    pub fn row_sum(&self, cell: usize) -> f64 {
        self.row(cell).1.iter().sum()
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_cells, self.n_genes));
        for r in 0..self.n_cells {
            let (cols, vals) = self.row(r);
            for (&c, &v) in cols.iter().zip(vals) {
                out[[r, c]] = v;
            }
        }
        out
    }

    /// Dense cells x `cols.len()` copy of the selected gene columns.
    pub fn dense_columns(&self, cols: &[usize]) -> Array2<f64> {
        let mut position = vec![usize::MAX; self.n_genes];
        for (k, &c) in cols.iter().enumerate() {
            position[c] = k;
        }
        let mut out = Array2::zeros((self.n_cells, cols.len()));
        for r in 0..self.n_cells {
            let (cs, vs) = self.row(r);
            for (&c, &v) in cs.iter().zip(vs) {
                if position[c] != usize::MAX {
                    out[[r, position[c]]] = v;
                }
            }
        }
        out
    }

    /// Same sparsity pattern with every stored value replaced.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        assert_eq!(values.len(), self.values.len());
        Self::from_csr(
            self.n_genes,
            self.indptr.clone(),
            self.indices.clone(),
            values,
            self.gene_names.clone(),
            self.barcodes.clone(),
        )
    }

    /// Keeps the flagged cells, preserving order.
    pub fn select_cells(&self, keep: &[bool]) -> Result<Self> {
        assert_eq!(keep.len(), self.n_cells);
        let mut indptr = vec![0];
        let mut indices = Vec::new();
        let mut values = Vec::new();
        let mut barcodes = Vec::new();
        for (r, _) in keep.iter().enumerate().filter(|(_, k)| **k) {
            let (cols, vals) = self.row(r);
            indices.extend_from_slice(cols);
            values.extend_from_slice(vals);
            indptr.push(indices.len());
            barcodes.push(self.barcodes[r].clone());
        }
        Self::from_csr(self.n_genes, indptr, indices, values, self.gene_names.clone(), barcodes)
    }

    /// Stacks cell rows of `other` underneath `self`; genes must agree.
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        if self.gene_names != other.gene_names {
            return Err(Error::Dimension("vstack requires identical gene lists".into()));
        }
        let mut indptr = self.indptr.clone();
        let offset = self.nnz();
        indptr.extend(other.indptr[1..].iter().map(|p| p + offset));
        let mut indices = self.indices.clone();
        indices.extend_from_slice(&other.indices);
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        let mut barcodes = self.barcodes.clone();
        barcodes.extend(other.barcodes.iter().cloned());
        Self::from_csr(self.n_genes, indptr, indices, values, self.gene_names.clone(), barcodes)
    }
}

fn check_unique(names: &[String], what: &str) -> Result<()> {
    let mut seen = HashSet::with_capacity(names.len());
    for n in names {
        if !seen.insert(n.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate {what} {n:?}")));
        }
    }
    Ok(())
}

/// Reads a MatrixMarket coordinate file plus its gene and barcode lists.
/// Duplicate coordinates are summed.
pub fn read_mtx(
    matrix_path: &Path,
    genes_path: &Path,
    barcodes_path: &Path,
    orientation: Orientation,
) -> Result<ExpressionMatrix> {
    let gene_names = read_names(genes_path)?;
    let barcodes = read_names(barcodes_path)?;

    let mut lines = open_lines(matrix_path)?;
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(matrix_path, 1, "empty file"))?;
    let header = header?;
    let fields: Vec<String> = header.split_whitespace().map(str::to_ascii_lowercase).collect();
    if fields.len() < 5 || fields[0] != "%%matrixmarket" || fields[1] != "matrix" || fields[2] != "coordinate" {
        return Err(Error::parse(matrix_path, 1, "expected a MatrixMarket coordinate header"));
    }
    if !matches!(fields[3].as_str(), "integer" | "real") {
        return Err(Error::parse(matrix_path, 1, format!("unsupported field type {}", fields[3])));
    }
    if fields[4] != "general" {
        return Err(Error::parse(matrix_path, 1, format!("unsupported symmetry {}", fields[4])));
    }

    let mut size: Option<(usize, usize, usize)> = None;
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    for (line_no, line) in lines {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('%') {
            continue;
        }
        let mut it = line.split_whitespace();
        match size {
            None => {
                let mut dims = [0usize; 3];
                for d in dims.iter_mut() {
                    *d = it
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::parse(matrix_path, line_no, "malformed size line"))?;
                }
                size = Some((dims[0], dims[1], dims[2]));
                triplets.reserve(dims[2]);
            }
            Some((rows, cols, _)) => {
                let bad = |m: &str| Error::parse(matrix_path, line_no, m.to_string());
                let i: usize = it.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("non-numeric row index"))?;
                let j: usize = it.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("non-numeric column index"))?;
                let v: f64 = it.next().and_then(|t| t.parse().ok()).ok_or_else(|| bad("non-numeric entry"))?;
                if i == 0 || j == 0 || i > rows || j > cols {
                    return Err(bad(&format!("coordinate ({i},{j}) out of range {rows}x{cols}")));
                }
                if !v.is_finite() || v < 0.0 {
                    return Err(bad("entries must be finite and nonnegative"));
                }
                let (cell, gene) = match orientation {
                    Orientation::GenesByCells => (j - 1, i - 1),
                    Orientation::CellsByGenes => (i - 1, j - 1),
                };
                triplets.push((cell, gene, v));
            }
        }
    }
    let (rows, cols, nnz) = size.ok_or_else(|| Error::parse(matrix_path, 1, "missing size line"))?;
    if triplets.len() != nnz {
        return Err(Error::parse(
            matrix_path,
            0,
            format!("header declares {nnz} entries, found {}", triplets.len()),
        ));
    }
    let (n_cells, n_genes) = match orientation {
        Orientation::GenesByCells => (cols, rows),
        Orientation::CellsByGenes => (rows, cols),
    };
    if gene_names.len() != n_genes {
        return Err(Error::Dimension(format!(
            "{} lists {} genes but the matrix has {}",
            genes_path.display(),
            gene_names.len(),
            n_genes
        )));
    }
    if barcodes.len() != n_cells {
        return Err(Error::Dimension(format!(
            "{} lists {} barcodes but the matrix has {}",
            barcodes_path.display(),
            barcodes.len(),
            n_cells
        )));
    }

    triplets.sort_by_key(|&(c, g, _)| (c, g));
    let mut indptr = vec![0usize; n_cells + 1];
    let mut indices = Vec::with_capacity(triplets.len());
    let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
    let mut last: Option<(usize, usize)> = None;
    for (c, g, v) in triplets {
        if last == Some((c, g)) {
            *values.last_mut().unwrap() += v;
        } else {
            indices.push(g);
            values.push(v);
            indptr[c + 1] += 1;
            last = Some((c, g));
        }
    }
    for r in 0..n_cells {
        indptr[r + 1] += indptr[r];
    }
    ExpressionMatrix::from_csr(n_genes, indptr, indices, values, gene_names, barcodes)
}

/// Writes the matrix plus its name files. Integer-valued matrices are
/// written with the `integer` field type.
pub fn write_mtx(
    x: &ExpressionMatrix,
    matrix_path: &Path,
    genes_path: &Path,
    barcodes_path: &Path,
    orientation: Orientation,
) -> Result<()> {
    let integral = x.values.iter().all(|v| v.fract() == 0.0 && *v < 9.0e15);
    let create = |p: &Path| File::create(p).map(BufWriter::new).map_err(|e| Error::io(p, e));

    let mut w = create(matrix_path)?;
    let io = |e| Error::io(matrix_path, e);
    let field = if integral { "integer" } else { "real" };
    writeln!(w, "%%MatrixMarket matrix coordinate {field} general").map_err(io)?;
    let (rows, cols) = match orientation {
        Orientation::GenesByCells => (x.n_genes, x.n_cells),
        Orientation::CellsByGenes => (x.n_cells, x.n_genes),
    };
    writeln!(w, "{rows} {cols} {}", x.nnz()).map_err(io)?;
    for r in 0..x.n_cells {
        let (cols_, vals) = x.row(r);
        for (&g, &v) in cols_.iter().zip(vals) {
            let (i, j) = match orientation {
                Orientation::GenesByCells => (g + 1, r + 1),
                Orientation::CellsByGenes => (r + 1, g + 1),
            };
            if integral {
                writeln!(w, "{i} {j} {}", v as u64).map_err(io)?;
            } else {
                writeln!(w, "{i} {j} {v:e}").map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)?;

    for (path, names) in [(genes_path, &x.gene_names), (barcodes_path, &x.barcodes)] {
        let mut w = create(path)?;
        for n in names {
            writeln!(w, "{n}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
