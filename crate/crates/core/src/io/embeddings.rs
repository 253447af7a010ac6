use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;

use super::{fmt_sig9, open_lines, CellTable};
use crate::{Error, Result};

/// Where an embedding matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Pca,
    Backbone(usize),
    Fused,
    Refined,
    /// Harmony-corrected PCA coordinates.
    Corrected,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Pca => write!(f, "pca"),
            Provenance::Backbone(m) => write!(f, "backbone:{m}"),
            Provenance::Fused => write!(f, "fused"),
            Provenance::Refined => write!(f, "refined"),
            Provenance::Corrected => write!(f, "corrected"),
        }
    }
}

impl FromStr for Provenance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pca" => Provenance::Pca,
            "fused" => Provenance::Fused,
            "refined" => Provenance::Refined,
            "corrected" => Provenance::Corrected,
            _ => match s.strip_prefix("backbone:").and_then(|m| m.parse().ok()) {
                Some(m) => Provenance::Backbone(m),
                None => return Err(Error::InvalidArgument(format!("unknown provenance {s:?}"))),
            },
        })
    }
}

/// Dense cells x d embedding matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub data: Array2<f64>,
    pub provenance: Provenance,
}

impl Embeddings {
    pub fn new(data: Array2<f64>, provenance: Provenance) -> Self {
        Self { data, provenance }
    }

    pub fn n_cells(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }
}

pub fn write_embeddings(emb: &Embeddings, cells: &CellTable, path: &Path) -> Result<()> {
    write_embeddings_with_header(emb, cells, path, &[])
}

/// Writes `barcode, batch, [label,] e_0..e_{d-1}` with 9 significant
/// digits. `comments` become leading `# ` lines.
pub fn write_embeddings_with_header(emb: &Embeddings, cells: &CellTable, path: &Path, comments: &[String]) -> Result<()> {
    if emb.n_cells() != cells.len() {
        return Err(Error::Dimension(format!(
            "{} embedding rows for {} cells",
            emb.n_cells(),
            cells.len()
        )));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    for c in comments {
        writeln!(w, "# {c}").map_err(io)?;
    }
    writeln!(w, "# provenance={}", emb.provenance).map_err(io)?;
    let with_labels = cells.has_labels();
    let mut header = String::from("barcode\tbatch");
    if with_labels {
        header.push_str("\tlabel");
    }
    for j in 0..emb.dim() {
        header.push_str(&format!("\te_{j}"));
    }
    writeln!(w, "{header}").map_err(io)?;
    for (i, row) in emb.data.rows().into_iter().enumerate() {
        let mut line = format!("{}\t{}", cells.barcodes[i], cells.batch_names[cells.batches[i]]);
        if with_labels {
            line.push('\t');
            match cells.labels[i] {
                Some(l) => line.push_str(&cells.label_names[l]),
                None => line.push_str("NA"),
            }
        }
        for v in row {
            line.push('\t');
            line.push_str(&fmt_sig9(*v));
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads an embeddings TSV written by [`write_embeddings`] (or any TSV
/// with `barcode`, `batch`, optional `label` and `e_*` columns).
pub fn read_embeddings(path: &Path) -> Result<(Embeddings, CellTable)> {
    let mut provenance = Provenance::Pca;
    let mut header: Option<Vec<String>> = None;
    let mut barcodes = Vec::new();
    let mut batches = Vec::new();
    let mut labels: Vec<Option<String>> = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut cols = (0usize, 0usize, None::<usize>, Vec::<usize>::new());
    for (line_no, line) in open_lines(path)? {
        let line = line?;
        if let Some(comment) = line.strip_prefix('#') {
            if let Some(p) = comment.trim().strip_prefix("provenance=") {
                provenance = p.parse()?;
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
        match &header {
            None => {
                let find = |n: &str| fields.iter().position(|f| *f == n);
                let bc = find("barcode").ok_or_else(|| Error::Metadata(format!("{}: missing column 'barcode'", path.display())))?;
                let bt = find("batch").ok_or_else(|| Error::Metadata(format!("{}: missing column 'batch'", path.display())))?;
                let mut emb_cols: Vec<(usize, usize)> = fields
                    .iter()
                    .enumerate()
                    .filter_map(|(i, f)| f.strip_prefix("e_").and_then(|k| k.parse().ok()).map(|k| (k, i)))
                    .collect();
                emb_cols.sort();
                if emb_cols.is_empty() {
                    return Err(Error::Metadata(format!("{}: no e_* columns", path.display())));
                }
                cols = (bc, bt, find("label"), emb_cols.into_iter().map(|(_, i)| i).collect());
                header = Some(fields.iter().map(|s| s.to_string()).collect());
            }
            Some(h) => {
                if fields.len() != h.len() {
                    return Err(Error::parse(path, line_no, format!("expected {} fields, found {}", h.len(), fields.len())));
                }
                barcodes.push(fields[cols.0].to_string());
                batches.push(fields[cols.1].to_string());
                labels.push(cols.2.map(|c| fields[c]).filter(|l| !matches!(*l, "" | "NA")).map(str::to_string));
                for &c in &cols.3 {
                    let v: f64 = fields[c]
                        .parse()
                        .map_err(|_| Error::parse(path, line_no, format!("non-numeric value {:?}", fields[c])))?;
                    values.push(v);
                }
            }
        }
    }
    let d = cols.3.len();
    if header.is_none() {
        return Err(Error::Metadata(format!("{}: no header", path.display())));
    }
    let data = Array2::from_shape_vec((barcodes.len(), d), values).expect("row width checked per line");
    let batch_refs: Vec<&str> = batches.iter().map(String::as_str).collect();
    let label_refs: Vec<Option<&str>> = labels.iter().map(|l| l.as_deref()).collect();
    let table = CellTable::from_names(barcodes, &batch_refs, cols.2.map(|_| label_refs.as_slice()));
    Ok((Embeddings::new(data, provenance), table))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn one_cell_two_coords() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.tsv");
        let cells = CellTable::single_batch(vec!["AAAC".into()]);
        let emb = Embeddings::new(array![[0.5, -1.0]], Provenance::Fused);
        write_embeddings(&emb, &cells, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(data.len(), 2);
        assert_eq!(data[1].split('\t').count(), 4);
        let (back, t) = read_embeddings(&p).unwrap();
        assert_eq!(back, emb);
        assert_eq!(t.barcodes, cells.barcodes);
    }

    #[test]
    fn row_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let cells = CellTable::single_batch(vec!["A".into(), "B".into()]);
        let emb = Embeddings::new(array![[0.5, -1.0]], Provenance::Pca);
        assert!(matches!(write_embeddings(&emb, &cells, &dir.path().join("e.tsv")), Err(Error::Dimension(_))));
    }

    #[test]
    fn provenance_text_roundtrip() {
        for p in [Provenance::Pca, Provenance::Backbone(3), Provenance::Fused, Provenance::Refined, Provenance::Corrected] {
            assert_eq!(p.to_string().parse::<Provenance>().unwrap(), p);
        }
    }
}
