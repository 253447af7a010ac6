//! On-disk artifacts: MatrixMarket counts, cell metadata, embeddings and
//! the flat parameter file.

mod embeddings;
mod meta;
mod mtx;
mod params;

pub use embeddings::{read_embeddings, write_embeddings, write_embeddings_with_header, Embeddings, Provenance};
pub use meta::{read_cell_metadata, read_cell_metadata_for, CellTable, QcMetrics};
pub use mtx::{read_mtx, write_mtx, ExpressionMatrix, Orientation};
pub use params::{ParamFile, PARAM_MAGIC};

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::{Error, Result};

pub(crate) fn open_lines(path: &Path) -> Result<impl Iterator<Item = (usize, Result<String>)> + '_> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(move |(i, l)| (i + 1, l.map_err(|e| Error::io(path, e)))))
}

/// Reads a one-name-per-line file. For tab-separated feature files the
/// second column (the symbol) is used.
pub(crate) fn read_names(path: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for (line_no, line) in open_lines(path)? {
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.is_empty() {
            continue;
        }
        let name = match line.split('\t').nth(1) {
            Some(symbol) if !symbol.is_empty() => symbol,
            _ => line.split('\t').next().unwrap_or(line),
        };
        if name.is_empty() {
            return Err(Error::parse(path, line_no, "empty name"));
        }
        names.push(name.to_string());
    }
    Ok(names)
}

/// Formats a float with 9 significant digits; the shortest text that
/// round-trips `write_embeddings` to within 1e-8 for unit-scale values.
pub fn fmt_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    format!("{v:.8e}")
}
