use std::collections::HashMap;
use std::path::Path;

use super::{open_lines, ExpressionMatrix};
use crate::{Error, Result};

/// Per-cell QC fields filled by [`crate::prep::compute_qc`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct QcMetrics {
    pub n_genes_by_counts: usize,
    pub total_counts: f64,
    pub pct_counts_mt: f64,
    pub pct_counts_ribo: f64,
}

/// Per-cell metadata aligned with the rows of an [`ExpressionMatrix`].
///
/// Batch and label names are mapped to dense indices in first-appearance
/// order; `labels[i]` is `None` for unlabeled cells.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTable {
    pub barcodes: Vec<String>,
    pub batches: Vec<usize>,
    pub batch_names: Vec<String>,
    pub labels: Vec<Option<usize>>,
    pub label_names: Vec<String>,
    pub qc: Vec<QcMetrics>,
    pub doublet_scores: Vec<f64>,
    pub is_doublet: Vec<bool>,
}

impl CellTable {
    /// A table with every cell in one batch and no labels.
    pub fn single_batch(barcodes: Vec<String>) -> Self {
        let n = barcodes.len();
        Self {
            barcodes,
            batches: vec![0; n],
            batch_names: vec!["batch0".to_string()],
            labels: vec![None; n],
            label_names: Vec::new(),
            qc: vec![QcMetrics::default(); n],
            doublet_scores: vec![0.0; n],
            is_doublet: vec![false; n],
        }
    }

    /// Builds a table from string columns, assigning dense indices in
    /// first-appearance order.
    pub fn from_names(barcodes: Vec<String>, batches: &[&str], labels: Option<&[Option<&str>]>) -> Self {
        let n = barcodes.len();
        assert_eq!(batches.len(), n);
        let mut t = Self::single_batch(barcodes);
        let mut interner = Interner::default();
        t.batches = batches.iter().map(|b| interner.index(b)).collect();
        t.batch_names = interner.names;
        if let Some(labels) = labels {
            assert_eq!(labels.len(), n);
            let mut interner = Interner::default();
            t.labels = labels.iter().map(|l| l.map(|l| interner.index(l))).collect();
            t.label_names = interner.names;
        }
        t
    }

    pub fn len(&self) -> usize {
        self.barcodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.barcodes.is_empty()
    }

    pub fn n_batches(&self) -> usize {
        self.batch_names.len()
    }

    pub fn n_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn has_labels(&self) -> bool {
        self.labels.iter().any(Option::is_some)
    }

    /// Keeps the flagged cells. Index maps are left as they are, so a batch
    /// may end up with no cells; call [`CellTable::compact`] to re-densify.
    pub fn select(&self, keep: &[bool]) -> Self {
        assert_eq!(keep.len(), self.len());
        fn pick<T: Clone>(v: &[T], keep: &[bool]) -> Vec<T> {
            v.iter().zip(keep).filter(|(_, k)| **k).map(|(x, _)| x.clone()).collect()
        }
        Self {
            barcodes: pick(&self.barcodes, keep),
            batches: pick(&self.batches, keep),
            batch_names: self.batch_names.clone(),
            labels: pick(&self.labels, keep),
            label_names: self.label_names.clone(),
            qc: pick(&self.qc, keep),
            doublet_scores: pick(&self.doublet_scores, keep),
            is_doublet: pick(&self.is_doublet, keep),
        }
    }

    /// Re-densifies batch and label indices after cells were removed.
    pub fn compact(&mut self) {
        let (batches, names) = densify(&self.batches.iter().map(|&b| Some(b)).collect::<Vec<_>>(), &self.batch_names);
        self.batches = batches.into_iter().map(|b| b.unwrap()).collect();
        self.batch_names = names;
        let (labels, names) = densify(&self.labels, &self.label_names);
        self.labels = labels;
        self.label_names = names;
    }
}

fn densify(idx: &[Option<usize>], names: &[String]) -> (Vec<Option<usize>>, Vec<String>) {
    let mut map: HashMap<usize, usize> = HashMap::new();
    let mut out_names = Vec::new();
    let out = idx
        .iter()
        .map(|i| {
            i.map(|i| {
                *map.entry(i).or_insert_with(|| {
                    out_names.push(names[i].clone());
                    out_names.len() - 1
                })
            })
        })
        .collect();
    (out, out_names)
}

#[derive(Default)]
struct Interner {
    map: HashMap<String, usize>,
    names: Vec<String>,
}

impl Interner {
    fn index(&mut self, name: &str) -> usize {
        if let Some(&i) = self.map.get(name) {
            return i;
        }
        self.names.push(name.to_string());
        self.map.insert(name.to_string(), self.names.len() - 1);
        self.names.len() - 1
    }
}

fn is_missing(field: &str) -> bool {
    matches!(field, "" | "NA" | "nan" | "NaN")
}

/// Reads a TSV with header columns `barcode`, `batch` and optionally
/// `label`; other columns are ignored. Rows are reordered to follow the
/// matrix and must cover its barcodes exactly.
pub fn read_cell_metadata(path: &Path, matrix: &ExpressionMatrix) -> Result<CellTable> {
    read_metadata(path, matrix.barcodes(), true)
}

/// Metadata for a subset of the cells in `path`, such as the cells kept
/// after filtering. Rows for other barcodes are ignored, and batch and label
/// names that only occur on those rows are dropped.
pub fn read_cell_metadata_for(path: &Path, barcodes: &[String]) -> Result<CellTable> {
    read_metadata(path, barcodes, false)
}

fn read_metadata(path: &Path, barcodes: &[String], exact: bool) -> Result<CellTable> {
    let mut lines = open_lines(path)?.filter(|(_, l)| !matches!(l, Ok(s) if s.starts_with('#') || s.trim().is_empty()));
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Metadata(format!("{}: empty file", path.display())))?;
    let header = header?;
    let cols: Vec<&str> = header.trim_end().split('\t').collect();
    let find = |name: &str| cols.iter().position(|c| c.eq_ignore_ascii_case(name));
    let barcode_col = find("barcode").ok_or_else(|| Error::Metadata(format!("{}: missing column 'barcode'", path.display())))?;
    let batch_col = find("batch").ok_or_else(|| Error::Metadata(format!("{}: missing column 'batch'", path.display())))?;
    let label_col = find("label");

    let mut rows: HashMap<String, (String, Option<String>)> = HashMap::new();
    let mut order: Vec<String> = Vec::new();
    for (line_no, line) in lines {
        let line = line?;
        let fields: Vec<&str> = line.trim_end_matches(['\r', '\n']).split('\t').collect();
        let get = |c: usize| {
            fields
                .get(c)
                .copied()
                .ok_or_else(|| Error::parse(path, line_no, format!("expected at least {} columns", c + 1)))
        };
        let barcode = get(barcode_col)?.to_string();
        let batch = get(batch_col)?.to_string();
        if is_missing(&batch) {
            return Err(Error::parse(path, line_no, "missing batch value"));
        }
        let label = match label_col {
            Some(c) => Some(fields.get(c).copied().unwrap_or("")).filter(|l| !is_missing(l)).map(str::to_string),
            None => None,
        };
        if rows.insert(barcode.clone(), (batch, label)).is_some() {
            return Err(Error::parse(path, line_no, format!("duplicate barcode {barcode:?}")));
        }
        order.push(barcode);
    }

    // first-appearance order follows the metadata file
    let mut batch_interner = Interner::default();
    let mut label_interner = Interner::default();
    let wanted: std::collections::HashSet<&str> = barcodes.iter().map(String::as_str).collect();
    for b in order.iter().filter(|b| exact || wanted.contains(b.as_str())) {
        let (batch, label) = &rows[b];
        batch_interner.index(batch);
        if let Some(l) = label {
            label_interner.index(l);
        }
    }

    let mut table = CellTable::single_batch(barcodes.to_vec());
    for (i, b) in barcodes.iter().enumerate() {
        let (batch, label) = rows
            .remove(b)
            .ok_or_else(|| Error::Metadata(format!("barcode {b:?} missing from {}", path.display())))?;
        table.batches[i] = batch_interner.index(&batch);
        table.labels[i] = label.map(|l| label_interner.index(&l));
    }
    if let Some(extra) = order.iter().find(|b| exact && rows.contains_key(*b)) {
        return Err(Error::Metadata(format!("unknown barcode {extra:?} in {}", path.display())));
    }
    table.batch_names = batch_interner.names;
    table.label_names = label_interner.names;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(barcodes: &[&str]) -> ExpressionMatrix {
        let n = barcodes.len();
        ExpressionMatrix::from_csr(
            1,
            vec![0; n + 1],
            vec![],
            vec![],
            vec!["G".into()],
            barcodes.iter().map(|s| s.to_string()).collect(),
        )
        .unwrap()
    }

    fn write(content: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), content).unwrap();
        f
    }

    #[test]
    fn batches_in_first_appearance_order() {
        let f = write("barcode\tbatch\tlabel\nA\tlab1\tT\nB\tlab2\tB\nC\tlab1\tT\n");
        let t = read_cell_metadata(f.path(), &matrix(&["A", "B", "C"])).unwrap();
        assert_eq!(t.batches, vec![0, 1, 0]);
        assert_eq!(t.batch_names, vec!["lab1", "lab2"]);
        assert_eq!(t.labels, vec![Some(0), Some(1), Some(0)]);
    }

    #[test]
    fn aligns_to_matrix_order() {
        let f = write("barcode\tbatch\nB\tx\nA\ty\n");
        let t = read_cell_metadata(f.path(), &matrix(&["A", "B"])).unwrap();
        assert_eq!(t.barcodes, vec!["A", "B"]);
        assert_eq!(t.batches, vec![1, 0]);
        assert_eq!(t.batch_names, vec!["x", "y"]);
    }

    #[test]
    fn missing_barcode_is_error() {
        let f = write("barcode\tbatch\nA\tx\n");
        assert!(matches!(read_cell_metadata(f.path(), &matrix(&["A", "B"])), Err(Error::Metadata(_))));
    }

    #[test]
    fn unknown_barcode_is_error() {
        let f = write("barcode\tbatch\nA\tx\nZ\tx\n");
        assert!(matches!(read_cell_metadata(f.path(), &matrix(&["A"])), Err(Error::Metadata(_))));
    }

    #[test]
    fn label_column_optional() {
        let f = write("barcode\tbatch\nA\tx\nB\tx\n");
        let t = read_cell_metadata(f.path(), &matrix(&["A", "B"])).unwrap();
        assert!(!t.has_labels());
        assert_eq!(t.n_labels(), 0);
    }

    #[test]
    fn missing_batch_column() {
        let f = write("barcode\tlabel\nA\tx\n");
        assert!(matches!(read_cell_metadata(f.path(), &matrix(&["A"])), Err(Error::Metadata(_))));
    }

    #[test]
    fn subset_ignores_other_rows() {
        let f = write("barcode\tbatch\tlabel\nZ\tdropped\tQ\nA\tx\tT\nB\ty\tT\n");
        let bcs = vec!["B".to_string(), "A".to_string()];
        let t = read_cell_metadata_for(f.path(), &bcs).unwrap();
        assert_eq!(t.batch_names, vec!["x", "y"]);
        assert_eq!(t.batches, vec![1, 0]);
        assert_eq!(t.label_names, vec!["T"]);
        assert!(read_cell_metadata_for(f.path(), &["C".to_string()]).is_err());
    }
}
