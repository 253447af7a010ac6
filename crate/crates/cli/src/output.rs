//! Output directory locking and provenance stamping.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use more_core::io::ParamFile;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const LOCK_NAME: &str = ".more-kit.lock";

/// An output directory held exclusively for the lifetime of the value.
#[derive(Debug)]
pub struct OutputDir {
    root: PathBuf,
    lock: PathBuf,
}

impl OutputDir {
    pub fn acquire(root: &Path) -> CliResult<Self> {
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        let lock = root.join(LOCK_NAME);
        let mut f = match OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(CliError::Usage(format!(
                    "output directory {} is locked by another run (delete {} if none is active)",
                    root.display(),
                    lock.display()
                )))
            }
            Err(e) => return Err(CliError::io(&lock, e)),
        };
        writeln!(f, "{}", std::process::id()).map_err(|e| CliError::io(&lock, e))?;
        Ok(Self { root: root.to_path_buf(), lock })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

/// Config hash and seed written into every output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

impl Stamp {
    /// SHA-256 over the subcommand name and the canonical JSON of its
    /// resolved settings.
    pub fn new(command: &str, settings: &impl Serialize, seed: u64) -> Self {
        let json = serde_json::to_string(settings).expect("settings serialize");
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(b"\n");
        h.update(json.as_bytes());
        let config_hash = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Self { config_hash, seed }
    }

    /// `# `-less header lines for TSV/CSV outputs.
    pub fn comments(&self) -> Vec<String> {
        vec![format!("config_hash={}", self.config_hash), format!("seed={}", self.seed)]
    }

    pub fn svg_comment(&self) -> String {
        format!("<!-- config_hash={} seed={} -->", self.config_hash, self.seed)
    }

    /// Adds `run.seed` and `run.config_hash` (one value per hash byte).
    pub fn stamp_params(&self, file: &mut ParamFile) {
        file.push("run.seed", vec![self.seed as f64]);
        let bytes = (0..self.config_hash.len())
            .step_by(2)
            .map(|i| u8::from_str_radix(&self.config_hash[i..i + 2], 16).unwrap_or(0) as f64)
            .collect();
        file.push("run.config_hash", bytes);
    }

    pub fn insert_into(&self, map: &mut serde_json::Map<String, serde_json::Value>) {
        map.insert("config_hash".into(), self.config_hash.clone().into());
        map.insert("seed".into(), self.seed.into());
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

/// Writes a tab-separated table preceded by the stamp comment lines.
pub fn write_table(path: &Path, stamp: &Stamp, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> CliResult<()> {
    write_delimited(path, stamp, '\t', header, rows)
}

pub fn write_delimited(
    path: &Path,
    stamp: &Stamp,
    sep: char,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> CliResult<()> {
    let mut w = create(path)?;
    let io = |e| CliError::io(path, e);
    for c in stamp.comments() {
        writeln!(w, "# {c}").map_err(io)?;
    }
    writeln!(w, "{}", header.join(&sep.to_string())).map_err(io)?;
    for row in rows {
        writeln!(w, "{}", row.join(&sep.to_string())).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn write_json(path: &Path, stamp: &Stamp, mut map: serde_json::Map<String, serde_json::Value>) -> CliResult<()> {
    stamp.insert_into(&mut map);
    let text = serde_json::to_string_pretty(&serde_json::Value::Object(map)).expect("json serializes");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Short fixed-precision float for tables.
pub fn num(v: f64) -> String {
    more_core::io::fmt_sig9(v)
}
