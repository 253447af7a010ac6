//! End-to-end embedding: counts → QC → optional doublet removal → HVG
//! tokens → frozen encoders → trained head → refined embeddings.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::backbone::{
    init_frozen_backbone, BackboneSpec, BackboneWeights, DEFAULT_D_MODEL, DEFAULT_FFN_DIM, DEFAULT_HEADS,
    DEFAULT_LAYERS, DEFAULT_TOKENS,
};
use crate::doublet::{detect_doublets, DoubletConfig, DoubletScores};
use crate::model::{forward, CellBatch, ModelDims, MoreParams, DEFAULT_DEPTH};
use crate::prep::{compute_qc, filter_cells, normalize_log1p, select_hvg, DEFAULT_MAX_PCT_MT, DEFAULT_MIN_GENES, DEFAULT_N_BINS, DEFAULT_TARGET_SUM};
use crate::train::{train, EpochLoss, LossWeights, TrainConfig};
use crate::io::ParamFile;
use crate::{CellTable, Embeddings, Error, ExpressionMatrix, Provenance, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    /// HVG tokens per modality (fewer if a modality has fewer genes).
    pub n_tokens: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub depth: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_tokens: DEFAULT_TOKENS,
            d_model: DEFAULT_D_MODEL,
            n_layers: DEFAULT_LAYERS,
            n_heads: DEFAULT_HEADS,
            ffn_dim: DEFAULT_FFN_DIM,
            depth: DEFAULT_DEPTH,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EmbedConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub losses: LossWeights,
    pub seed: u64,
}

/// Fixed per-dimension centering and scaling of a frozen encoder's
/// outputs, fitted on the cells that carry the modality.
///
/// Mean pooling leaves every cell sharing a large common component (the
/// pooled gene embeddings), so raw outputs differ between cells only in a
/// thin shell; without this the head spends its training budget undoing
/// the offset and supervised losses barely move.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputStandardizer {
    pub mean: Array1<f64>,
    pub scale: Array1<f64>,
}

/// Dimensions with a smaller spread are only centered.
const MIN_SCALE: f64 = 1e-8;

impl OutputStandardizer {
    pub fn fit(raw: ArrayView2<f64>, present: &[bool]) -> Self {
        let d = raw.ncols();
        let rows: Vec<usize> = (0..raw.nrows()).filter(|&i| present[i]).collect();
        if rows.is_empty() {
            return Self { mean: Array1::zeros(d), scale: Array1::ones(d) };
        }
        let sub = raw.select(Axis(0), &rows);
        let mean = sub.mean_axis(Axis(0)).expect("at least one row");
        let scale = sub.std_axis(Axis(0), 0.0).mapv(|s| if s > MIN_SCALE { s } else { 1.0 });
        Self { mean, scale }
    }

    pub fn apply(&self, raw: &mut Array2<f64>) {
        for mut row in raw.rows_mut() {
            row -= &self.mean;
            row /= &self.scale;
        }
    }

    /// Adds `backbone.m{m}.output_mean` and `backbone.m{m}.output_scale`.
    pub fn export(&self, file: &mut ParamFile, m: usize) {
        file.push(format!("backbone.m{m}.output_mean"), self.mean.to_vec());
        file.push(format!("backbone.m{m}.output_scale"), self.scale.to_vec());
    }
}

/// Sub-seeds derived from the run seed so each stage draws independently.
fn sub_seed(seed: u64, stage: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stage)
}

#[derive(Debug, Clone)]
pub struct FeatureEmbedding {
    pub refined: Embeddings,
    pub fused: Embeddings,
    pub logits: Array2<f64>,
    pub initial_params: MoreParams,
    pub params: MoreParams,
    pub backbones: Vec<BackboneWeights>,
    pub standardizers: Vec<OutputStandardizer>,
    /// Backbone hashes taken before training.
    pub hashes_before: Vec<String>,
    pub history: Vec<EpochLoss>,
}

impl FeatureEmbedding {
    /// True when every encoder still hashes to its pre-training value.
    pub fn backbones_unchanged(&self) -> bool {
        self.backbones.iter().zip(&self.hashes_before).all(|(b, h)| b.content_hash() == *h)
    }
}

/// Trains the head on per-modality token values (cells × tokens each) and
/// returns refined embeddings for every cell. Modality 0's tokens are the
/// reconstruction targets. `present` marks which cells carry each modality
/// (all, when `None`).
pub fn embed_features(
    features: &[Array2<f64>],
    present: Option<Vec<Vec<bool>>>,
    cells: &CellTable,
    cfg: &EmbedConfig,
) -> Result<FeatureEmbedding> {
    if features.is_empty() {
        return Err(Error::InvalidArgument("no modalities".into()));
    }
    let n = cells.len();
    if let Some(f) = features.iter().find(|f| f.nrows() != n) {
        return Err(Error::Dimension(format!("feature matrix has {} rows for {n} cells", f.nrows())));
    }
    let present = present.unwrap_or_else(|| features.iter().map(|_| vec![true; n]).collect());
    if present.len() != features.len() || present.iter().any(|p| p.len() != n) {
        return Err(Error::Dimension("presence flags do not match modalities and cells".into()));
    }
    let mut backbones = Vec::with_capacity(features.len());
    let mut standardizers = Vec::with_capacity(features.len());
    let mut raw = Vec::with_capacity(features.len());
    for (m, f) in features.iter().enumerate() {
        let spec = BackboneSpec {
            modality: m,
            n_tokens: f.ncols(),
            d_model: cfg.model.d_model,
            n_layers: cfg.model.n_layers,
            n_heads: cfg.model.n_heads,
            ffn_dim: cfg.model.ffn_dim,
            seed: sub_seed(cfg.seed, 1),
        };
        let w = init_frozen_backbone(spec)?;
        // encoders are frozen, so their outputs are computed once
        let mut r = w.encode_batch(f.view())?;
        let st = OutputStandardizer::fit(r.view(), &present[m]);
        st.apply(&mut r);
        raw.push(r);
        standardizers.push(st);
        backbones.push(w);
    }
    let hashes_before = backbones.iter().map(|b| b.hash().to_string()).collect();

    let data = CellBatch {
        raw,
        present,
        batches: cells.batches.clone(),
        labels: cells.labels.clone(),
        targets: features[0].clone(),
    };
    let dims = ModelDims {
        d: cfg.model.d_model,
        n_modalities: features.len(),
        n_batches: cells.n_batches().max(1),
        n_classes: cells.n_labels().max(2),
        n_genes: features[0].ncols(),
        depth: cfg.model.depth,
    };
    let initial_params = MoreParams::init(dims, sub_seed(cfg.seed, 2))?;
    let train_cfg = TrainConfig { seed: sub_seed(cfg.seed, 3), depth: cfg.model.depth, ..cfg.train };
    let trained = train(&initial_params, &data, &train_cfg, &cfg.losses)?;
    let trace = forward(&trained.params, &data, &[])?;
    Ok(FeatureEmbedding {
        refined: Embeddings::new(trace.refined().clone(), Provenance::Refined),
        fused: Embeddings::new(trace.z_f.clone(), Provenance::Fused),
        logits: trace.logits,
        initial_params,
        params: trained.params,
        backbones,
        standardizers,
        hashes_before,
        history: trained.history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepConfig {
    pub min_genes: usize,
    pub max_pct_mt: f64,
    pub target_sum: f64,
    pub n_tokens: usize,
    /// Score doublets on modality 0 after QC.
    pub score_doublets: bool,
    /// Drop called doublets before embedding (implies scoring).
    pub remove_doublets: bool,
    pub doublet: DoubletConfig,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            min_genes: DEFAULT_MIN_GENES,
            max_pct_mt: DEFAULT_MAX_PCT_MT,
            target_sum: DEFAULT_TARGET_SUM,
            n_tokens: DEFAULT_TOKENS,
            score_doublets: false,
            remove_doublets: false,
            doublet: DoubletConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PreparedData {
    /// Cells kept after QC (and doublet removal), with QC and doublet
    /// fields filled.
    pub cells: CellTable,
    /// Per modality, cells × tokens normalized expression.
    pub features: Vec<Array2<f64>>,
    pub present: Vec<Vec<bool>>,
    /// Token gene names per modality, in column order.
    pub token_genes: Vec<Vec<String>>,
    pub doublets: Option<DoubletScores>,
}

/// Modality 0 drives QC; other modalities are matched by barcode and may
/// miss some cells.
pub fn prepare_counts(matrices: &[ExpressionMatrix], cells: &CellTable, cfg: &PrepConfig) -> Result<PreparedData> {
    let Some(first) = matrices.first() else {
        return Err(Error::InvalidArgument("no modalities".into()));
    };
    if cells.len() != first.n_cells() {
        return Err(Error::Dimension(format!("{} metadata rows for {} cells", cells.len(), first.n_cells())));
    }
    let mut cells = cells.clone();
    cells.qc = compute_qc(first);
    let (mut counts, mut cells) = filter_cells(first, &cells, cfg.min_genes, cfg.max_pct_mt)?;

    let mut doublets = None;
    if cfg.score_doublets || cfg.remove_doublets {
        let scores = detect_doublets(&counts, &cfg.doublet, None)?;
        cells.doublet_scores = scores.l_d.clone();
        cells.is_doublet = scores.is_doublet.clone();
        if cfg.remove_doublets {
            let keep: Vec<bool> = scores.is_doublet.iter().map(|d| !d).collect();
            if !keep.iter().any(|&k| k) {
                return Err(Error::EmptyResult);
            }
            counts = counts.select_cells(&keep)?;
            cells = cells.select(&keep);
            cells.compact();
        }
        doublets = Some(scores);
    }

    let mut features = Vec::with_capacity(matrices.len());
    let mut present = Vec::with_capacity(matrices.len());
    let mut token_genes = Vec::with_capacity(matrices.len());
    for (m, mat) in matrices.iter().enumerate() {
        let (aligned, here) = if m == 0 {
            (counts.clone(), vec![true; cells.len()])
        } else {
            align_to(mat, &cells.barcodes)?
        };
        let norm = normalize_log1p(&aligned, cfg.target_sum)?;
        let hvg = select_hvg(&norm, cfg.n_tokens.min(norm.n_genes()), DEFAULT_N_BINS)?;
        let mut genes = hvg.selected_ranked();
        genes.sort_unstable();
        token_genes.push(genes.iter().map(|&g| norm.gene_names()[g].clone()).collect());
        features.push(norm.dense_columns(&genes));
        present.push(here);
    }
    Ok(PreparedData { cells, features, present, token_genes, doublets })
}

/// Rows of `mat` reordered to `barcodes`; missing cells become empty rows.
fn align_to(mat: &ExpressionMatrix, barcodes: &[String]) -> Result<(ExpressionMatrix, Vec<bool>)> {
    let index: HashMap<&str, usize> = mat.barcodes().iter().enumerate().map(|(i, b)| (b.as_str(), i)).collect();
    let mut indptr = vec![0];
    let mut indices = Vec::new();
    let mut values = Vec::new();
    let mut present = Vec::with_capacity(barcodes.len());
    for b in barcodes {
        match index.get(b.as_str()) {
            Some(&r) => {
                let (idx, val) = mat.row(r);
                indices.extend_from_slice(idx);
                values.extend_from_slice(val);
                present.push(true);
            }
            None => present.push(false),
        }
        indptr.push(indices.len());
    }
    if !present.iter().any(|&p| p) {
        return Err(Error::Metadata("an extra modality shares no barcodes with the primary one".into()));
    }
    let x = ExpressionMatrix::from_csr(mat.n_genes(), indptr, indices, values, mat.gene_names().to_vec(), barcodes.to_vec())?;
    Ok((x, present))
}
