//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit when any
//! fails. Pass criterion numbers as arguments to run a subset.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use more_core::annotate::predict;
use more_core::backbone::{init_frozen_backbone, BackboneSpec};
use more_core::cluster::kmeans;
use more_core::doublet::{detect_doublets, doublet_posterior, DoubletConfig};
use more_core::harmony::{run_harmony, HarmonyConfig};
use more_core::io::{read_mtx, write_mtx, Orientation};
use more_core::metrics::{ari, auroc, batch_entropy};
use more_core::model::{default_trainable_ratio, fuse, refine, softmax, CellBatch, ModelDims, MoreParams, TwoLayer};
use more_core::pipeline::{embed_features, prepare_counts, EmbedConfig, PrepConfig};
use more_core::prep::{normalize_log1p, pca, select_hvg, DEFAULT_N_BINS};
use more_core::synth::{add_sum_doublets, cell_type_counts, gaussian_blobs, planted_hvg_counts, BlobConfig, CountsConfig};
use more_core::train::{
    finite_difference_grad, loss_and_grad, loss_ce, loss_intra, loss_masked_mse, loss_supcon, max_relative_error, total_loss,
    LossTerms, LossWeights,
};
use more_core::ExpressionMatrix;
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    ensure(elapsed < limit, || format!("{what} took {elapsed:.1?}, limit {limit:?}"))
}

fn gradient_instance(seed: u64) -> (MoreParams, CellBatch, Vec<usize>) {
    let (n, d, c, b, m, g) = (8, 16, 3, 2, 2, 10);
    let dims = ModelDims { d, n_modalities: m, n_batches: b, n_classes: c, n_genes: g, depth: 2 };
    let mut params = MoreParams::init(dims, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    for t in params.tensors_mut() {
        t.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    let raw = (0..m).map(|_| Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))).collect();
    let batches = (0..n).map(|_| rng.random_range(0..b)).collect();
    let labels = (0..n).map(|i| Some(i % c)).collect();
    let targets = Array2::from_shape_fn((n, g), |_| rng.random_range(0.0..2.0));
    (params, CellBatch::complete(raw, batches, labels, targets), vec![0, 3, 7])
}

fn c1_gradients() -> Outcome {
    let t = Instant::now();
    let w = LossWeights::default();
    let mut worst = (0.0f64, String::new());
    for seed in 0..20 {
        let (p, batch, mask) = gradient_instance(seed);
        let analytic = loss_and_grad(&p, &batch, &mask, &w).map_err(|e| e.to_string())?.grads;
        let numeric = finite_difference_grad(&p, &batch, &mask, &w, 1e-5).map_err(|e| e.to_string())?;
        let (err, name) = max_relative_error(&analytic, &numeric, 1e-8);
        if err > worst.0 {
            worst = (err, name);
        }
    }
    ensure(worst.0 < 1e-4, || format!("max relative error {:.2e} in {}", worst.0, worst.1))?;
    within(t.elapsed(), Duration::from_secs(60), "gradient check")?;
    Ok(format!("20 seeds, max relative error {:.2e} ({})", worst.0, worst.1))
}

fn c2_frozen_backbone() -> Outcome {
    let ds = cell_type_counts(&CountsConfig { n_cells: 150, n_genes: 500, ..CountsConfig::default() }, 7);
    let prep = PrepConfig { min_genes: 20, ..PrepConfig::default() };
    let prepared = prepare_counts(&[ds.matrix], &ds.cells, &prep).map_err(|e| e.to_string())?;
    let cfg = EmbedConfig { seed: 7, ..EmbedConfig::default() };
    let before = init_frozen_backbone(BackboneSpec { n_tokens: prepared.features[0].ncols(), ..BackboneSpec::default() })
        .map_err(|e| e.to_string())?;
    let out = embed_features(&prepared.features, Some(prepared.present), &prepared.cells, &cfg).map_err(|e| e.to_string())?;
    ensure(out.history.len() == 30, || format!("{} epochs", out.history.len()))?;
    let after = out.backbones[0].content_hash();
    ensure(after == out.hashes_before[0] && out.backbones_unchanged(), || "backbone hash changed".into())?;
    let trainable = out.params.parameter_count();
    let total = trainable + out.backbones[0].parameter_count();
    let ratio = trainable as f64 / total as f64;
    let (nt, nn) = default_trainable_ratio();
    let nominal = nt as f64 / nn as f64;
    ensure(ratio < 0.05 && nominal < 0.05, || format!("trainable ratio {ratio:.4} (nominal {nominal:.4})"))?;
    ensure(before.parameter_count() == out.backbones[0].parameter_count(), || "default backbone shape differs".into())?;
    Ok(format!(
        "hash {}.. unchanged after 30 epochs, trainable/total {trainable}/{total} = {ratio:.4} (nominal 4 batches, 10 classes: {nominal:.4})",
        &after[..12]
    ))
}

fn c3_refinement() -> Outcome {
    let t = Instant::now();
    let mut passes = 0;
    let mut notes = Vec::new();
    for seed in 0..5 {
        let blobs = gaussian_blobs(&BlobConfig::default(), seed);
        let cells = blobs.cell_table();
        let cfg = EmbedConfig { seed, ..EmbedConfig::default() };
        let out = embed_features(std::slice::from_ref(&blobs.data), None, &cells, &cfg).map_err(|e| e.to_string())?;
        let e0 = batch_entropy(blobs.data.view(), &blobs.batches, 15).map_err(|e| e.to_string())?;
        let e1 = batch_entropy(out.refined.data.view(), &blobs.batches, 15).map_err(|e| e.to_string())?;
        let km = kmeans(out.refined.data.view(), 3, 10, 100, seed).map_err(|e| e.to_string())?;
        let a1 = ari(&km.assignments, &blobs.classes).map_err(|e| e.to_string())?;
        let ok = e1 >= e0 + 0.15 && a1 >= 0.8;
        passes += usize::from(ok);
        notes.push(format!("s{seed}: H {e0:.2}->{e1:.2} ARI {a1:.2}{}", if ok { "" } else { " x" }));
    }
    ensure(passes >= 4, || format!("{passes}/5 seeds: {}", notes.join(", ")))?;
    within(t.elapsed(), Duration::from_secs(300), "refinement benchmark")?;
    Ok(format!("{passes}/5 seeds [{}]", notes.join(", ")))
}

fn c4_harmony() -> Outcome {
    let mut passes = 0;
    let mut notes = Vec::new();
    for seed in 0..5 {
        let blobs = gaussian_blobs(&BlobConfig::default(), seed);
        let cfg = HarmonyConfig { seed, ..HarmonyConfig::default() };
        let out = run_harmony(blobs.data.view(), &blobs.batches, &cfg).map_err(|e| e.to_string())?;
        let e0 = batch_entropy(blobs.data.view(), &blobs.batches, 15).map_err(|e| e.to_string())?;
        let e1 = batch_entropy(out.view(), &blobs.batches, 15).map_err(|e| e.to_string())?;
        let a0 = ari(&kmeans(blobs.data.view(), 3, 10, 100, seed).unwrap().assignments, &blobs.classes).unwrap();
        let a1 = ari(&kmeans(out.view(), 3, 10, 100, seed).unwrap().assignments, &blobs.classes).unwrap();
        let ok = e1 >= e0 + 0.10 && (a1 - a0).abs() <= 0.05;
        passes += usize::from(ok);
        notes.push(format!("s{seed}: H {e0:.2}->{e1:.2} ARI {a0:.2}->{a1:.2}{}", if ok { "" } else { " x" }));
    }
    ensure(passes >= 4, || format!("{passes}/5 seeds: {}", notes.join(", ")))?;
    Ok(format!("{passes}/5 seeds [{}]", notes.join(", ")))
}

fn c5_doublets() -> Outcome {
    let d = DoubletConfig::default();
    for (rho, r) in [(d.rho, d.r), (0.01, 0.5), (0.3, 5.0)] {
        let (l0, l1) = (doublet_posterior(0.0, rho, r).unwrap(), doublet_posterior(1.0, rho, r).unwrap());
        ensure(l0 == 0.0 && l1 == 1.0, || format!("L_d(0) = {l0}, L_d(1) = {l1} at rho {rho}, r {r}"))?;
    }
    let cfg = CountsConfig { n_cells: 500, n_types: 3, n_batches: 1, ..CountsConfig::default() };
    let ds = cell_type_counts(&cfg, 0);
    let (x, truth) = add_sum_doublets(&ds.matrix, &ds.types, 50, 1).map_err(|e| e.to_string())?;
    let scores = detect_doublets(&x, &DoubletConfig::default(), None).map_err(|e| e.to_string())?;
    let a = auroc(&scores.l_d, &truth).map_err(|e| e.to_string())?;
    ensure(a >= 0.9, || format!("AUROC {a:.3}"))?;
    let called = scores.is_doublet.iter().filter(|&&c| c).count();
    Ok(format!("AUROC {a:.3} on 500 singlets + 50 doublets ({called} called), L_d(0)=0 and L_d(1)=1 exactly"))
}

fn c6_losses() -> Outcome {
    let ce = loss_ce(Array1::zeros(4).view(), 2).unwrap();
    ensure((ce - 4f64.ln()).abs() <= 1e-9, || format!("uniform CE {ce}"))?;
    let same = Array2::from_shape_fn((4, 5), |(_, j)| 0.3 * j as f64 - 0.4);
    for tau in [0.01, 0.1, 1.0, 7.0] {
        let s = loss_supcon(same.view(), &[0, 0, 1, 1], tau).unwrap();
        ensure((s - 3f64.ln()).abs() <= 1e-6, || format!("SupCon {s} at tau {tau}"))?;
    }
    let emb = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64);
    let intra = loss_intra(emb.view(), &[0, 1, 2]).unwrap();
    ensure(intra == 0.0, || format!("singleton intra {intra}"))?;
    let v = Array1::linspace(-1.0, 2.0, 7);
    let mse = loss_masked_mse(v.view(), v.view()).unwrap();
    ensure(mse == 0.0, || format!("MSE {mse}"))?;
    let terms = LossTerms { ce: 1.3, supcon: 2.1, align: 0.4, intra: 0.9, mse: 0.25 };
    let wa = LossWeights { lambda_ce: 0.5, lambda_supcon: 0.2, lambda_align: 1.5, lambda_var: 0.1, lambda_mse: 2.0, ..LossWeights::default() };
    let wb = LossWeights { lambda_ce: 1.0, lambda_supcon: 0.7, lambda_align: 0.0, lambda_var: 0.3, lambda_mse: 0.4, ..LossWeights::default() };
    let sum = LossWeights {
        lambda_ce: wa.lambda_ce + wb.lambda_ce,
        lambda_supcon: wa.lambda_supcon + wb.lambda_supcon,
        lambda_align: wa.lambda_align + wb.lambda_align,
        lambda_var: wa.lambda_var + wb.lambda_var,
        lambda_mse: wa.lambda_mse + wb.lambda_mse,
        ..wa
    };
    let gap = (total_loss(&terms, &sum) - total_loss(&terms, &wa) - total_loss(&terms, &wb)).abs();
    let scaled = LossWeights {
        lambda_ce: 3.0 * wa.lambda_ce,
        lambda_supcon: 3.0 * wa.lambda_supcon,
        lambda_align: 3.0 * wa.lambda_align,
        lambda_var: 3.0 * wa.lambda_var,
        lambda_mse: 3.0 * wa.lambda_mse,
        ..wa
    };
    let scale_gap = (total_loss(&terms, &scaled) - 3.0 * total_loss(&terms, &wa)).abs();
    ensure(gap < 1e-12 && scale_gap < 1e-12, || format!("total loss not linear in lambda ({gap:e}, {scale_gap:e})"))?;
    Ok(format!("CE ln4 err {:.1e}, SupCon ln3 over 4 taus, Intra 0, MSE 0, total linear in lambda", (ce - 4f64.ln()).abs()))
}

fn c7_mechanisms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let dims = ModelDims { d: 6, n_modalities: 1, n_batches: 3, n_classes: 4, n_genes: 5, depth: 0 };
    let mut p = MoreParams::init(dims, 4).unwrap();
    p.omega[0].fill(1.0);
    let z = Array1::from_shape_fn(6, |_| rng.random_range(-4.0..4.0));
    ensure(fuse(&p, &[Some(z.view())]).unwrap() == z, || "single-modality fusion is not the identity".into())?;
    p.refiner = TwoLayer::zeros(6);
    p.batch_emb.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    for t in [0, 1, 2, 5] {
        p.depth = t;
        for b in 0..3 {
            let (out, steps) = refine(&p, z.view(), b).unwrap();
            ensure(out == z && steps.len() == t + 1, || format!("zero refiner moved the input at T = {t}"))?;
        }
    }
    let logits = Array1::from_shape_fn(4, |_| rng.random_range(-5.0..5.0));
    let shifted = softmax((&logits + 123.4).view());
    let worst = (&softmax(logits.view()) - &shifted).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    ensure(worst < 1e-14, || format!("softmax changed by {worst:e} under a shift"))?;
    let emb = Array2::from_shape_fn((20, 6), |_| rng.random_range(-2.0..2.0));
    let (l0, c0) = predict(&p, emb.view()).unwrap();
    let mut q = p.clone();
    q.classifier_b += 57.0;
    let (l1, c1) = predict(&q, emb.view()).unwrap();
    let conf_gap = c0.iter().zip(&c1).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    ensure(l0 == l1 && conf_gap < 1e-12, || format!("predict not shift invariant ({conf_gap:e})"))?;
    Ok("fusion identity, zero-refiner identity for T in {0,1,2,5}, predict shift invariant".into())
}

fn c8_hvg_pca() -> Outcome {
    let (x, planted) = planted_hvg_counts(1000, 2000, 50, 3);
    let norm = normalize_log1p(&x, 1e4).unwrap();
    let hvg = select_hvg(&norm, 50, DEFAULT_N_BINS).unwrap();
    let hits = planted.iter().filter(|&&g| hvg.selected[g]).count();
    let recall = hits as f64 / planted.len() as f64;
    ensure(recall >= 0.95, || format!("planted recall {recall:.3}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ratios = Vec::new();
    // small and large feature counts take the dense and iterative eigen paths
    for (n, p) in [(200, 30), (600, 450)] {
        let dir: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data = Array2::from_shape_fn((n, p), |(i, j)| (i as f64 - n as f64 / 2.0) * dir[j] + 2.0);
        let (m, _) = pca(data.view(), 5, 0).unwrap();
        ratios.push(m.explained_variance_ratio[0]);
    }
    ensure(ratios.iter().all(|&r| r >= 0.999), || format!("rank-1 ratios {ratios:?}"))?;
    Ok(format!("planted recall {hits}/50 = {recall:.2}, rank-1 first ratio {:.6} / {:.6}", ratios[0], ratios[1]))
}

fn c9_determinism() -> Outcome {
    let work = tempfile::tempdir().unwrap();
    let cfg = repo_file("configs/synthetic.toml");
    let cfg = cfg.to_str().unwrap();
    let (a, b) = (work.path().join("a"), work.path().join("b"));
    for out in [&a, &b] {
        let o = run_in(out, &["embed", "--config", cfg]);
        ensure(o.status.success(), || format!("embed failed: {}", stderr(&o)))?;
    }
    let ea = std::fs::read(a.join("embeddings.tsv")).unwrap();
    ensure(ea == std::fs::read(b.join("embeddings.tsv")).unwrap(), || "embeddings.tsv differs between runs".into())?;

    let sim = work.path().join("sim");
    let o = run_in(&sim, &["simulate", "--cells", "200", "--genes", "150", "--doublets", "10"]);
    ensure(o.status.success(), || stderr(&o))?;
    let x = read_mtx(&sim.join("matrix.mtx"), &sim.join("genes.tsv"), &sim.join("barcodes.tsv"), Orientation::GenesByCells)
        .map_err(|e| e.to_string())?;
    let real = normalize_log1p(&x, 1e4).unwrap();
    for (m, o) in [(&x, Orientation::GenesByCells), (&real, Orientation::CellsByGenes)] {
        let back = round_trip(m, o, work.path())?;
        ensure(back.to_dense() == m.to_dense(), || format!("{o:?} round trip changed values"))?;
        ensure(back.gene_names() == m.gene_names() && back.barcodes() == m.barcodes(), || "names changed".into())?;
    }
    Ok(format!("shipped config twice: {} identical bytes; integer and real MTX round trips exact", ea.len()))
}

fn round_trip(x: &ExpressionMatrix, o: Orientation, dir: &Path) -> Result<ExpressionMatrix, String> {
    let (m, g, b) = (dir.join("rt.mtx"), dir.join("rt_genes.tsv"), dir.join("rt_barcodes.tsv"));
    write_mtx(x, &m, &g, &b, o).map_err(|e| e.to_string())?;
    read_mtx(&m, &g, &b, o).map_err(|e| e.to_string())
}

fn peak_child_rss_bytes() -> u64 {
    let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
    // SAFETY: getrusage only writes into the struct we pass
    let rc = unsafe { libc::getrusage(libc::RUSAGE_CHILDREN, &mut usage) };
    assert_eq!(rc, 0, "getrusage failed");
    // kilobytes on Linux
    usage.ru_maxrss as u64 * 1024
}

fn c10_desk_scale() -> Outcome {
    let work = tempfile::tempdir().unwrap();
    let w = |n: &str| work.path().join(n);
    let data = w("data");
    let o = run_in(
        &data,
        &["simulate", "--cells", "4900", "--doublets", "100", "--genes", "2000", "--types", "5", "--batches", "3"],
    );
    ensure(o.status.success(), || stderr(&o))?;
    let d = |n: &str| data.join(n).to_str().unwrap().to_string();
    let input = [
        "--matrix".to_string(),
        d("matrix.mtx"),
        "--genes".into(),
        d("genes.tsv"),
        "--barcodes".into(),
        d("barcodes.tsv"),
        "--metadata".into(),
        d("metadata.tsv"),
    ];
    let config = w("embed.toml");
    let toml = format!(
        "[data]\nmatrix = {:?}\ngenes = {:?}\nbarcodes = {:?}\nmetadata = {:?}\nremove_doublets = true\n",
        d("matrix.mtx"),
        d("genes.tsv"),
        d("barcodes.tsv"),
        d("metadata.tsv")
    );
    std::fs::write(&config, toml).unwrap();
    let s = |p: std::path::PathBuf| p.to_str().unwrap().to_string();
    let stages: Vec<(&str, Vec<String>)> = vec![
        ("qc", [vec!["qc".to_string()], input.to_vec()].concat()),
        ("doublets", [vec!["doublets".to_string()], input.to_vec()].concat()),
        ("embed", vec!["embed".into(), "--config".into(), s(config.clone())]),
        (
            "annotate",
            vec![
                "annotate".into(),
                "--params".into(),
                s(w("embed").join("params.bin")),
                "--embeddings".into(),
                s(w("embed").join("embeddings.tsv")),
                "--classes".into(),
                s(w("embed").join("classes.txt")),
            ],
        ),
        (
            "metrics",
            vec![
                "metrics".into(),
                "--embeddings".into(),
                s(w("embed").join("embeddings.tsv")),
                "--metadata".into(),
                d("metadata.tsv"),
                "--annotation".into(),
                s(w("annotate").join("annotation.tsv")),
            ],
        ),
    ];
    let start = Instant::now();
    let mut times = Vec::new();
    for (name, args) in &stages {
        let t = Instant::now();
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = run_in(&w(name), &args);
        ensure(o.status.success(), || format!("{name} failed: {}", stderr(&o)))?;
        times.push(format!("{name} {:.0}s", t.elapsed().as_secs_f64()));
    }
    let total = start.elapsed();
    let rss = peak_child_rss_bytes();
    let m = json(&w("metrics").join("metrics.json"));
    within(total, Duration::from_secs(600), "pipeline")?;
    ensure(rss < 4 << 30, || format!("peak RSS {:.2} GB", rss as f64 / (1u64 << 30) as f64))?;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    Ok(format!(
        "5000 x 2000 in {:.0}s on {threads} core(s) [{}], peak RSS {:.0} MB, ari {} annotation accuracy {}",
        total.as_secs_f64(),
        times.join(", "),
        rss as f64 / (1u64 << 20) as f64,
        m["ari"],
        m["annotation_accuracy"]
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient correctness", c1_gradients),
        ("frozen backbone", c2_frozen_backbone),
        ("batch-robust refinement", c3_refinement),
        ("harmony baseline", c4_harmony),
        ("doublet detection", c5_doublets),
        ("loss identities", c6_losses),
        ("mechanism identities", c7_mechanisms),
        ("hvg recall and pca", c8_hvg_pca),
        ("determinism", c9_determinism),
        ("desk-scale pipeline", c10_desk_scale),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {n:>2} {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n:>2} {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
