use std::path::{Path, PathBuf};

use clap::Args;
use more_core::io::{read_cell_metadata, read_mtx, write_embeddings_with_header, ParamFile};
use more_core::pipeline::{embed_features, prepare_counts};
use more_core::synth::{add_sum_doublets, cell_type_counts, CountsConfig};
use more_core::{CellTable, ExpressionMatrix};
use serde::Serialize;
use serde_json::Value;

use super::{label_name, orientation, write_scatters, Ctx};
use crate::config::{Config, SyntheticConfig};
use crate::error::{CliError, CliResult};
use crate::output::{num, write_delimited, write_json, write_table, write_text, Stamp};
use crate::report::{integration_metrics, DEFAULT_METRIC_K};

#[derive(Debug, Args, Serialize)]
pub struct EmbedArgs {
    /// TOML config with [data], [model], [train] and [losses] sections
    #[arg(long)]
    pub config: PathBuf,
}

/// Counts per modality plus metadata aligned to modality 0.
pub fn load_data(cfg: &Config, base: &Path, transpose: bool, seed: u64) -> CliResult<(Vec<ExpressionMatrix>, CellTable)> {
    let d = &cfg.data;
    if let Some(s) = &d.synthetic {
        if d.matrix.is_some() || !d.extra_modalities.is_empty() {
            return Err(CliError::Usage("[data.synthetic] cannot be combined with matrix files".into()));
        }
        let (x, cells) = synthetic(s, seed)?;
        return Ok((vec![x], cells));
    }
    let (Some(m), Some(g), Some(b)) = (&d.matrix, &d.genes, &d.barcodes) else {
        return Err(CliError::Usage("[data] needs matrix, genes and barcodes, or a [data.synthetic] table".into()));
    };
    let x = read_mtx(&base.join(m), &base.join(g), &base.join(b), orientation(transpose || d.transpose))?;
    let cells = match &d.metadata {
        Some(p) => read_cell_metadata(&base.join(p), &x)?,
        None => CellTable::single_batch(x.barcodes().to_vec()),
    };
    let mut mats = vec![x];
    for e in &d.extra_modalities {
        let o = orientation(transpose || e.transpose);
        mats.push(read_mtx(&base.join(&e.matrix), &base.join(&e.genes), &base.join(&e.barcodes), o)?);
    }
    Ok((mats, cells))
}

pub fn synthetic(s: &SyntheticConfig, seed: u64) -> CliResult<(ExpressionMatrix, CellTable)> {
    if s.cells == 0 || s.genes == 0 || s.types == 0 || s.batches == 0 {
        return Err(CliError::Usage("[data.synthetic] sizes must be at least 1".into()));
    }
    if s.doublets > 0 && s.types < 2 {
        return Err(CliError::Usage("synthetic doublets need at least two types".into()));
    }
    let cfg = CountsConfig {
        n_cells: s.cells,
        n_genes: s.genes,
        n_types: s.types,
        n_batches: s.batches,
        batch_effect_sd: s.batch_effect_sd,
        marker_fold: s.marker_fold,
        depth: s.depth,
        ..CountsConfig::default()
    };
    let ds = cell_type_counts(&cfg, seed);
    if s.doublets == 0 {
        return Ok((ds.matrix, ds.cells));
    }
    let (x, truth) = add_sum_doublets(&ds.matrix, &ds.types, s.doublets, seed.wrapping_add(1))?;
    let batches: Vec<&str> = (0..x.n_cells())
        .map(|i| if truth[i] { "batch0" } else { ds.cells.batch_names[ds.cells.batches[i]].as_str() })
        .collect();
    let labels: Vec<Option<&str>> = (0..x.n_cells())
        .map(|i| (!truth[i]).then(|| ds.cells.label_names[ds.cells.labels[i].unwrap()].as_str()))
        .collect();
    let cells = CellTable::from_names(x.barcodes().to_vec(), &batches, Some(&labels));
    Ok((x, cells))
}

fn stamped_params(stamp: &Stamp, fill: impl FnOnce(&mut ParamFile)) -> ParamFile {
    let mut f = ParamFile::default();
    fill(&mut f);
    stamp.stamp_params(&mut f);
    f
}

/// Runs prep, optional doublet scoring, the frozen encoders, training and
/// refinement, then writes every artifact into the output directory.
pub fn run(ctx: &Ctx, args: &EmbedArgs) -> CliResult<()> {
    let mut cfg = Config::load(&args.config)?;
    let seed = ctx.seed.or(cfg.seed).unwrap_or(0);
    cfg.seed = Some(seed);
    let stamp = Stamp::new("embed", &(&cfg, ctx.transpose), seed);
    let base = args.config.parent().unwrap_or(Path::new("."));

    let (mats, cells) = load_data(&cfg, base, ctx.transpose, seed)?;
    let prepared = prepare_counts(&mats, &cells, &cfg.prep_config(seed))?;
    let cells = prepared.cells;
    eprintln!(
        "embed: {} cells after QC{}, {} modalities, {} tokens in modality 0",
        cells.len(),
        if prepared.doublets.is_some() { " and doublet scoring" } else { "" },
        prepared.features.len(),
        prepared.features[0].ncols()
    );
    let out = embed_features(&prepared.features, Some(prepared.present), &cells, &cfg.embed_config(seed))?;

    let comments = stamp.comments();
    write_embeddings_with_header(&out.refined, &cells, &ctx.out.path("embeddings.tsv"), &comments)?;
    write_embeddings_with_header(&out.fused, &cells, &ctx.out.path("fused_embeddings.tsv"), &comments)?;
    stamped_params(&stamp, |f| out.params.export(f)).write(&ctx.out.path("params.bin"))?;
    stamped_params(&stamp, |f| out.initial_params.export(f)).write(&ctx.out.path("params_init.bin"))?;
    let backbone_file = stamped_params(&stamp, |f| {
        for (m, (b, st)) in out.backbones.iter().zip(&out.standardizers).enumerate() {
            b.export(f);
            st.export(f, m);
        }
    });
    backbone_file.write(&ctx.out.path("backbone.bin"))?;

    let n_classes = out.params.dims().n_classes;
    let classes: Vec<String> = (0..n_classes)
        .map(|c| cells.label_names.get(c).cloned().unwrap_or_else(|| format!("class{c}")))
        .collect();
    let mut text: String = comments.iter().map(|c| format!("# {c}\n")).collect();
    text.extend(classes.iter().map(|c| format!("{c}\n")));
    write_text(&ctx.out.path("classes.txt"), &text)?;

    let token_rows = prepared
        .token_genes
        .iter()
        .enumerate()
        .flat_map(|(m, genes)| genes.iter().enumerate().map(move |(t, g)| vec![m.to_string(), t.to_string(), g.clone()]));
    write_table(&ctx.out.path("tokens.tsv"), &stamp, &["modality", "token", "gene"], token_rows)?;

    let cell_rows = (0..cells.len()).map(|i| {
        let q = &cells.qc[i];
        vec![
            cells.barcodes[i].clone(),
            cells.batch_names[cells.batches[i]].clone(),
            label_name(&cells, i),
            q.n_genes_by_counts.to_string(),
            num(q.total_counts),
            num(q.pct_counts_mt),
            num(cells.doublet_scores[i]),
            cells.is_doublet[i].to_string(),
        ]
    });
    write_table(
        &ctx.out.path("cells.tsv"),
        &stamp,
        &["barcode", "batch", "label", "n_genes_by_counts", "total_counts", "pct_counts_mt", "doublet_score", "is_doublet"],
        cell_rows,
    )?;

    let loss_rows = out.history.iter().map(|e| {
        let t = &e.terms;
        vec![e.epoch.to_string(), num(t.ce), num(t.supcon), num(t.align), num(t.intra), num(t.mse), num(e.total)]
    });
    write_delimited(&ctx.out.path("loss.csv"), &stamp, ',', &["epoch", "ce", "supcon", "align", "intra", "mse", "total"], loss_rows)?;

    let mut m = integration_metrics(out.refined.data.view(), &cells, DEFAULT_METRIC_K, seed)?;
    m.insert("backbone_hashes".into(), Value::from(out.hashes_before.clone()));
    m.insert("backbones_unchanged".into(), out.backbones_unchanged().into());
    m.insert("trainable_parameters".into(), out.params.parameter_count().into());
    m.insert("backbone_parameters".into(), out.backbones.iter().map(|b| b.parameter_count()).sum::<usize>().into());
    m.insert("final_loss".into(), crate::report::json_f64(out.history.last().map(|e| e.total)));
    write_json(&ctx.out.path("metrics.json"), &stamp, m)?;
    write_scatters(ctx, &stamp, &out.refined, &cells, "scatter")?;
    eprintln!("embed: wrote {}", ctx.out.path("embeddings.tsv").display());
    Ok(())
}
