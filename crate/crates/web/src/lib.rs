//! Browser bindings for three small demos. Every entry point returns a JSON
//! string; errors come back as `{"error": "..."}`.

use more_core::cluster::kmeans;
use more_core::doublet::doublet_posterior;
use more_core::harmony::{run_harmony, HarmonyConfig};
use more_core::metrics::{ari, batch_entropy};
use more_core::pipeline::{embed_features, EmbedConfig, ModelConfig};
use more_core::prep::pca;
use more_core::synth::{gaussian_blobs, BlobConfig, Blobs};
use more_core::train::TrainConfig;
use ndarray::ArrayView2;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

const ENTROPY_K: usize = 15;

fn respond(r: Result<Value, String>) -> String {
    r.unwrap_or_else(|e| json!({ "error": e })).to_string()
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Rows of a cells x 2 array as `[[x, y], ...]`.
fn points(x: ArrayView2<f64>) -> Vec<[f64; 2]> {
    x.rows().into_iter().map(|r| [r[0], r[1]]).collect()
}

/// Projects `before` and `after` onto the first two principal axes of
/// `before`, so both panels share one frame.
fn shared_projection(before: ArrayView2<f64>, after: ArrayView2<f64>, seed: u64) -> Result<(Value, Value), String> {
    let (m, _) = pca(before, 2, seed).map_err(err)?;
    Ok((json!(points(m.transform(before).view())), json!(points(m.transform(after).view()))))
}

fn project(x: ArrayView2<f64>, seed: u64) -> Result<Vec<[f64; 2]>, String> {
    let (_, proj) = pca(x, 2, seed).map_err(err)?;
    Ok(points(proj.data.view()))
}

fn scores(x: ArrayView2<f64>, blobs: &Blobs, seed: u64) -> Result<Value, String> {
    let h = batch_entropy(x, &blobs.batches, ENTROPY_K).map_err(err)?;
    let km = kmeans(x, blobs_classes(blobs), 10, 100, seed).map_err(err)?;
    let a = ari(&km.assignments, &blobs.classes).map_err(err)?;
    Ok(json!({ "batch_entropy": h, "ari": a }))
}

fn blobs_classes(b: &Blobs) -> usize {
    b.classes.iter().max().map_or(1, |m| m + 1)
}

/// Doublet posterior `L_d(q)` sampled at `n` evenly spaced points of [0, 1].
#[wasm_bindgen]
pub fn doublet_curve(rho: f64, r: f64, n: usize) -> String {
    respond((|| {
        let n = n.clamp(2, 2000);
        let q: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let l = q.iter().map(|&q| doublet_posterior(q, rho, r)).collect::<Result<Vec<_>, _>>().map_err(err)?;
        Ok(json!({ "q": q, "l_d": l }))
    })())
}

fn demo_blobs(n_cells: usize, batch_offset: f64, seed: u64) -> Blobs {
    let cfg = BlobConfig { n_cells: n_cells.clamp(30, 2000), batch_offset, ..BlobConfig::default() };
    gaussian_blobs(&cfg, seed)
}

/// Harmony correction of two-batch Gaussian blobs.
#[wasm_bindgen]
pub fn harmony_demo(n_cells: usize, batch_offset: f64, lambda_div: f64, seed: u64) -> String {
    respond((|| {
        let blobs = demo_blobs(n_cells, batch_offset, seed);
        let cfg = HarmonyConfig { lambda_div, seed, ..HarmonyConfig::default() };
        let out = run_harmony(blobs.data.view(), &blobs.batches, &cfg).map_err(err)?;
        let (before, after) = shared_projection(blobs.data.view(), out.view(), seed)?;
        Ok(json!({
            "classes": blobs.classes,
            "batches": blobs.batches,
            "before": before,
            "after": after,
            "scores_before": scores(blobs.data.view(), &blobs, seed)?,
            "scores_after": scores(out.view(), &blobs, seed)?,
        }))
    })())
}

/// Trains a small head on blobs and reports the loss curve and the
/// refined embedding.
#[wasm_bindgen]
pub fn train_demo(n_cells: usize, epochs: usize, depth: usize, seed: u64) -> String {
    respond((|| {
        let blobs = demo_blobs(n_cells.min(600), 4.0, seed);
        let cfg = EmbedConfig {
            model: ModelConfig { ffn_dim: 64, depth, ..ModelConfig::default() },
            train: TrainConfig { epochs: epochs.clamp(1, 60), depth, seed, ..TrainConfig::default() },
            seed,
            ..EmbedConfig::default()
        };
        let out = embed_features(std::slice::from_ref(&blobs.data), None, &blobs.cell_table(), &cfg).map_err(err)?;
        let loss: Vec<f64> = out.history.iter().map(|e| e.total).collect();
        let unchanged = out.backbones_unchanged();
        let refined = out.refined.data;
        Ok(json!({
            "classes": blobs.classes,
            "batches": blobs.batches,
            // the refined space has its own width, so each panel gets its own axes
            "before": project(blobs.data.view(), seed)?,
            "after": project(refined.view(), seed)?,
            "loss": loss,
            "backbone_unchanged": unchanged,
            "scores_before": scores(blobs.data.view(), &blobs, seed)?,
            "scores_after": scores(refined.view(), &blobs, seed)?,
        }))
    })())
}
