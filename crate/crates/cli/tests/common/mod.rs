#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_more-kit"))
}

pub fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).env_remove("MORE_KIT_THREADS").output().expect("spawn more-kit")
}

pub fn run_in(out: &Path, args: &[&str]) -> Output {
    let mut all = vec!["--out-dir", out.to_str().unwrap()];
    all.extend_from_slice(args);
    run(&all)
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn fixture(rel: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(rel).to_str().unwrap().to_string()
}

pub fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

/// Non-comment rows of a TSV, header included.
pub fn table(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect()
}

pub fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// A small synthetic embed config; `extra` is appended verbatim and may
/// override sections.
pub fn small_config(dir: &Path, train: &str, losses: &str) -> PathBuf {
    let text = format!(
        "seed = 3\n\n[data]\nmin_genes = 10\n\n[data.synthetic]\ncells = 90\ngenes = 120\ntypes = 3\nbatches = 2\n\n\
         [model]\ntokens = 32\nffn_dim = 256\n\n[train]\n{train}\n\n[losses]\n{losses}\n"
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}
