//! Trainable head on top of the frozen encoders.
//!
//! Per modality an adapter `W2·tanh(W1·z + b1) + b2`, an element-wise fusion
//! `z_f = Σ ω_m ⊙ z_m`, then `T` residual refinement steps
//! `y ← y + Refine(y − b_batch)`, a linear classifier and a linear decoder
//! that reconstructs masked gene values. Batched math uses row vectors, so a
//! layer with weight `W` (out × in) maps `X` to `X·Wᵀ + b`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::backbone::{backbone_parameter_count, DEFAULT_D_MODEL, DEFAULT_FFN_DIM, DEFAULT_LAYERS, DEFAULT_TOKENS};
use crate::io::ParamFile;
use crate::{rng_from_seed, Error, Result, Rng};

pub const DEFAULT_DEPTH: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub d: usize,
    pub n_modalities: usize,
    pub n_batches: usize,
    pub n_classes: usize,
    /// Decoder output width (gene positions that can be masked).
    pub n_genes: usize,
    pub depth: usize,
}

impl ModelDims {
    pub const fn trainable_parameter_count(&self) -> usize {
        trainable_parameter_count(self.d, self.n_modalities, self.n_batches, self.n_classes, self.n_genes)
    }
}

pub const fn trainable_parameter_count(d: usize, modalities: usize, batches: usize, classes: usize, genes: usize) -> usize {
    let two_layer = 2 * (d * d + d);
    modalities * (two_layer + d) + batches * d + two_layer + classes * (d + 1) + genes * (d + 1)
}

// Budget at default dims with a generous number of batches and classes.
const NOMINAL_BATCHES: usize = 4;
const NOMINAL_CLASSES: usize = 10;
const DEFAULT_TRAINABLE: usize =
    trainable_parameter_count(DEFAULT_D_MODEL, 1, NOMINAL_BATCHES, NOMINAL_CLASSES, DEFAULT_TOKENS);
const DEFAULT_TOTAL: usize =
    DEFAULT_TRAINABLE + backbone_parameter_count(DEFAULT_TOKENS, DEFAULT_D_MODEL, DEFAULT_LAYERS, DEFAULT_FFN_DIM);
const _: () = assert!(DEFAULT_TRAINABLE * 20 < DEFAULT_TOTAL, "trainable share must stay below 5%");

/// Trainable over total parameters at default dims, as checked at build time.
pub const fn default_trainable_ratio() -> (usize, usize) {
    (DEFAULT_TRAINABLE, DEFAULT_TOTAL)
}

/// `W2·tanh(W1·x + b1) + b2` with square weights.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayer {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl TwoLayer {
    pub fn zeros(d: usize) -> Self {
        Self {
            w1: Array2::zeros((d, d)),
            b1: Array1::zeros(d),
            w2: Array2::zeros((d, d)),
            b2: Array1::zeros(d),
        }
    }

    fn random(rng: &mut Rng, d: usize, out_scale: f64) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        let mut draw = |scale: f64| {
            Array2::from_shape_fn((d, d), |_| {
                let z: f64 = StandardNormal.sample(rng);
                z * scale
            })
        };
        let w1 = draw(s);
        let w2 = draw(s * out_scale);
        Self { w1, b1: Array1::zeros(d), w2, b2: Array1::zeros(d) }
    }

    /// Returns `(hidden, output)` for row inputs.
    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let mut h = x.dot(&self.w1.t()) + &self.b1;
        h.mapv_inplace(f64::tanh);
        let out = h.dot(&self.w2.t()) + &self.b2;
        (h, out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoreParams {
    pub adapters: Vec<TwoLayer>,
    pub omega: Vec<Array1<f64>>,
    pub batch_emb: Array2<f64>,
    pub refiner: TwoLayer,
    pub classifier_w: Array2<f64>,
    pub classifier_b: Array1<f64>,
    pub decoder_w: Array2<f64>,
    pub decoder_b: Array1<f64>,
    pub depth: usize,
}

impl MoreParams {
    /// All-zero store of the given shape (also used for gradients), with
    /// fusion weights at zero too.
    pub fn zeros(dims: ModelDims) -> Self {
        let d = dims.d;
        Self {
            adapters: (0..dims.n_modalities).map(|_| TwoLayer::zeros(d)).collect(),
            omega: (0..dims.n_modalities).map(|_| Array1::zeros(d)).collect(),
            batch_emb: Array2::zeros((dims.n_batches, d)),
            refiner: TwoLayer::zeros(d),
            classifier_w: Array2::zeros((dims.n_classes, d)),
            classifier_b: Array1::zeros(dims.n_classes),
            decoder_w: Array2::zeros((dims.n_genes, d)),
            decoder_b: Array1::zeros(dims.n_genes),
            depth: dims.depth,
        }
    }

    /// Seeded initialization: ω = 1, batch embeddings 0, biases 0, weights
    /// Gaussian scaled by `1/sqrt(d)` (refiner output and heads damped).
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        if dims.d == 0 || dims.n_modalities == 0 || dims.n_batches == 0 {
            return Err(Error::InvalidArgument(format!("invalid model dims {dims:?}")));
        }
        if dims.n_classes < 2 {
            return Err(Error::InvalidArgument("classifier needs at least 2 classes".into()));
        }
        let mut rng = rng_from_seed(seed);
        let d = dims.d;
        let mut p = Self::zeros(dims);
        for a in &mut p.adapters {
            *a = TwoLayer::random(&mut rng, d, 1.0);
        }
        p.omega.iter_mut().for_each(|w| w.fill(1.0));
        p.refiner = TwoLayer::random(&mut rng, d, 0.1);
        let s = 0.1 / (d as f64).sqrt();
        let mut head = |rows: usize| {
            Array2::from_shape_fn((rows, d), |_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * s
            })
        };
        p.classifier_w = head(dims.n_classes);
        p.decoder_w = head(dims.n_genes);
        Ok(p)
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d: self.classifier_w.ncols(),
            n_modalities: self.adapters.len(),
            n_batches: self.batch_emb.nrows(),
            n_classes: self.classifier_w.nrows(),
            n_genes: self.decoder_w.nrows(),
            depth: self.depth,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Every trainable tensor with its parameter-file name, in file order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        fn flat<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> &[f64] {
            a.as_slice().expect("parameter tensors are contiguous")
        }
        let mut out = Vec::new();
        for (m, a) in self.adapters.iter().enumerate() {
            out.push((format!("adapter.m{m}.w1"), flat(&a.w1)));
            out.push((format!("adapter.m{m}.b1"), flat(&a.b1)));
            out.push((format!("adapter.m{m}.w2"), flat(&a.w2)));
            out.push((format!("adapter.m{m}.b2"), flat(&a.b2)));
        }
        for (m, w) in self.omega.iter().enumerate() {
            out.push((format!("fusion.omega.m{m}"), flat(w)));
        }
        out.push(("batch_emb".into(), flat(&self.batch_emb)));
        let r = &self.refiner;
        out.push(("refiner.w1".into(), flat(&r.w1)));
        out.push(("refiner.b1".into(), flat(&r.b1)));
        out.push(("refiner.w2".into(), flat(&r.w2)));
        out.push(("refiner.b2".into(), flat(&r.b2)));
        out.push(("classifier.weight".into(), flat(&self.classifier_w)));
        out.push(("classifier.bias".into(), flat(&self.classifier_b)));
        out.push(("decoder.weight".into(), flat(&self.decoder_w)));
        out.push(("decoder.bias".into(), flat(&self.decoder_b)));
        out
    }

    /// Mutable view of [`MoreParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        fn flat<D: ndarray::Dimension>(a: &mut ndarray::Array<f64, D>) -> &mut [f64] {
            a.as_slice_mut().expect("parameter tensors are contiguous")
        }
        let mut out = Vec::new();
        for a in &mut self.adapters {
            out.push(flat(&mut a.w1));
            out.push(flat(&mut a.b1));
            out.push(flat(&mut a.w2));
            out.push(flat(&mut a.b2));
        }
        for w in &mut self.omega {
            out.push(flat(w));
        }
        out.push(flat(&mut self.batch_emb));
        let r = &mut self.refiner;
        out.push(flat(&mut r.w1));
        out.push(flat(&mut r.b1));
        out.push(flat(&mut r.w2));
        out.push(flat(&mut r.b2));
        out.push(flat(&mut self.classifier_w));
        out.push(flat(&mut self.classifier_b));
        out.push(flat(&mut self.decoder_w));
        out.push(flat(&mut self.decoder_b));
        out
    }

    pub fn export(&self, file: &mut ParamFile) {
        for (name, t) in self.tensors() {
            file.push(name, t.to_vec());
        }
        file.push("refiner.depth".to_string(), vec![self.depth as f64]);
    }

    /// Rebuilds the store from a parameter file; shapes are inferred from
    /// the section lengths.
    pub fn import(file: &ParamFile) -> Result<Self> {
        let n_modalities = (0..).take_while(|m| file.get(&format!("fusion.omega.m{m}")).is_some()).count();
        if n_modalities == 0 {
            return Err(Error::InvalidArgument("parameter file has no fusion.omega.m0 section".into()));
        }
        let d = file.require("fusion.omega.m0")?.len();
        let n_batches = file.require("batch_emb")?.len() / d.max(1);
        let n_classes = file.require("classifier.bias")?.len();
        let n_genes = file.require("decoder.bias")?.len();
        let depth = match file.require("refiner.depth")? {
            [t] if *t >= 0.0 && t.fract() == 0.0 => *t as usize,
            other => return Err(Error::InvalidArgument(format!("bad refiner.depth {other:?}"))),
        };
        let dims = ModelDims { d, n_modalities, n_batches, n_classes, n_genes, depth };
        let mut p = Self::zeros(dims);
        let names: Vec<String> = p.tensors().into_iter().map(|(n, _)| n).collect();
        for (name, dst) in names.iter().zip(p.tensors_mut()) {
            let src = file.require(name)?;
            if src.len() != dst.len() {
                return Err(Error::Dimension(format!("{name}: {} values, expected {}", src.len(), dst.len())));
            }
            dst.copy_from_slice(src);
        }
        Ok(p)
    }

    fn check_modality(&self, m: usize) -> Result<()> {
        if m >= self.adapters.len() {
            return Err(Error::InvalidArgument(format!("modality {m} out of range ({})", self.adapters.len())));
        }
        Ok(())
    }

    fn check_len(&self, what: &str, len: usize) -> Result<()> {
        let d = self.dims().d;
        if len != d {
            return Err(Error::Dimension(format!("{what} has length {len}, expected {d}")));
        }
        Ok(())
    }
}

fn as_row(v: ArrayView1<f64>) -> ArrayView2<f64> {
    v.insert_axis(Axis(0))
}

/// Adapter for modality `m` applied to one backbone output.
pub fn adapt(params: &MoreParams, m: usize, z_raw: ArrayView1<f64>) -> Result<Array1<f64>> {
    params.check_modality(m)?;
    params.check_len("backbone output", z_raw.len())?;
    let (_, out) = params.adapters[m].forward(as_row(z_raw));
    Ok(out.row(0).to_owned())
}

/// Weighted element-wise sum over the modalities that are present.
pub fn fuse(params: &MoreParams, z: &[Option<ArrayView1<f64>>]) -> Result<Array1<f64>> {
    if z.len() != params.omega.len() {
        return Err(Error::Dimension(format!("{} modality slots, model has {}", z.len(), params.omega.len())));
    }
    let mut out: Option<Array1<f64>> = None;
    for (m, zm) in z.iter().enumerate() {
        let Some(zm) = zm else { continue };
        params.check_len("modality embedding", zm.len())?;
        let term = &params.omega[m] * zm;
        out = Some(match out {
            None => term,
            Some(acc) => acc + term,
        });
    }
    out.ok_or_else(|| Error::InvalidArgument("no modality present".into()))
}

/// Runs the refinement loop for one cell. Returns the final iterate and
/// every iterate `z̃^(0..=T)`.
pub fn refine(params: &MoreParams, z_f: ArrayView1<f64>, batch: usize) -> Result<(Array1<f64>, Vec<Array1<f64>>)> {
    params.check_len("fused embedding", z_f.len())?;
    if batch >= params.batch_emb.nrows() {
        return Err(Error::InvalidArgument(format!("batch index {batch} out of range ({})", params.batch_emb.nrows())));
    }
    let step = |u: ArrayView1<f64>| params.refiner.forward(as_row(u)).1.row(0).to_owned();
    let steps = iterate_residual(z_f.to_owned(), params.batch_emb.row(batch), params.depth, step);
    Ok((steps.last().unwrap().clone(), steps))
}

/// `y_{t+1} = y_t + step(y_t − b)` for `depth` steps, returning all iterates.
pub fn iterate_residual(
    y0: Array1<f64>,
    b: ArrayView1<f64>,
    depth: usize,
    step: impl Fn(ArrayView1<f64>) -> Array1<f64>,
) -> Vec<Array1<f64>> {
    let mut out = vec![y0];
    for _ in 0..depth {
        let y = out.last().unwrap();
        let next = y + &step((y - &b).view());
        out.push(next);
    }
    out
}

pub fn classify(params: &MoreParams, z: ArrayView1<f64>) -> Result<Array1<f64>> {
    params.check_len("embedding", z.len())?;
    Ok(params.classifier_w.dot(&z) + &params.classifier_b)
}

/// Decoder outputs at the masked gene positions, in mask order.
pub fn decode_masked(params: &MoreParams, z: ArrayView1<f64>, mask: &[usize]) -> Result<Array1<f64>> {
    params.check_len("embedding", z.len())?;
    check_mask(params, mask)?;
    Ok(mask.iter().map(|&t| params.decoder_w.row(t).dot(&z) + params.decoder_b[t]).collect())
}

fn check_mask(params: &MoreParams, mask: &[usize]) -> Result<()> {
    let g = params.decoder_b.len();
    match mask.iter().find(|&&t| t >= g) {
        Some(t) => Err(Error::InvalidArgument(format!("mask position {t} out of range ({g})"))),
        None => Ok(()),
    }
}

/// States `y_0..=y_T` and refiner hidden activations `h_0..h_{T-1}`.
fn refine_rows(params: &MoreParams, y0: Array2<f64>, batches: &[usize]) -> (Vec<Array2<f64>>, Vec<Array2<f64>>) {
    let b_sel = params.batch_emb.select(Axis(0), batches);
    let mut states = vec![y0];
    let mut hidden = Vec::with_capacity(params.depth);
    for _ in 0..params.depth {
        let y = states.last().unwrap();
        let u = y - &b_sel;
        let (h, step) = params.refiner.forward(u.view());
        hidden.push(h);
        states.push(y + &step);
    }
    (states, hidden)
}

/// Per-cell inputs to the head: cached backbone outputs and the targets of
/// the masked reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct CellBatch {
    /// Per modality, cells × d backbone outputs. Rows of absent modalities
    /// are ignored.
    pub raw: Vec<Array2<f64>>,
    /// Per modality, which cells carry that modality.
    pub present: Vec<Vec<bool>>,
    pub batches: Vec<usize>,
    pub labels: Vec<Option<usize>>,
    /// Cells × G values the decoder reconstructs.
    pub targets: Array2<f64>,
}

impl CellBatch {
    /// All modalities present for every cell.
    pub fn complete(raw: Vec<Array2<f64>>, batches: Vec<usize>, labels: Vec<Option<usize>>, targets: Array2<f64>) -> Self {
        let n = batches.len();
        let present = raw.iter().map(|_| vec![true; n]).collect();
        Self { raw, present, batches, labels, targets }
    }

    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            raw: self.raw.iter().map(|r| r.select(Axis(0), idx)).collect(),
            present: self.present.iter().map(|p| idx.iter().map(|&i| p[i]).collect()).collect(),
            batches: idx.iter().map(|&i| self.batches[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            targets: self.targets.select(Axis(0), idx),
        }
    }

    pub fn validate(&self, params: &MoreParams) -> Result<()> {
        let dims = params.dims();
        let n = self.len();
        if self.raw.len() != dims.n_modalities || self.present.len() != dims.n_modalities {
            return Err(Error::Dimension(format!("batch has {} modalities, model has {}", self.raw.len(), dims.n_modalities)));
        }
        for (r, p) in self.raw.iter().zip(&self.present) {
            if r.dim() != (n, dims.d) || p.len() != n {
                return Err(Error::Dimension(format!("modality input {:?}, expected ({n}, {})", r.dim(), dims.d)));
            }
        }
        if self.labels.len() != n || self.targets.nrows() != n || self.targets.ncols() != dims.n_genes {
            return Err(Error::Dimension("labels or targets do not match the batch".into()));
        }
        if let Some(b) = self.batches.iter().find(|&&b| b >= dims.n_batches) {
            return Err(Error::InvalidArgument(format!("batch index {b} out of range ({})", dims.n_batches)));
        }
        if let Some(c) = self.labels.iter().flatten().find(|&&c| c >= dims.n_classes) {
            return Err(Error::InvalidArgument(format!("label {c} out of range ({})", dims.n_classes)));
        }
        if let Some(i) = (0..n).find(|&i| self.present.iter().all(|p| !p[i])) {
            return Err(Error::InvalidArgument(format!("cell {i} has no modality present")));
        }
        Ok(())
    }
}

/// Everything the backward pass needs from a batched forward.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub adapter_hidden: Vec<Array2<f64>>,
    /// Post-adapter embeddings per modality (absent rows zeroed).
    pub z_m: Vec<Array2<f64>>,
    pub z_f: Array2<f64>,
    /// `z̃^(0..=T)`; the first equals `z_f`.
    pub states: Vec<Array2<f64>>,
    pub refiner_hidden: Vec<Array2<f64>>,
    pub logits: Array2<f64>,
    /// Cells × |mask| decoder outputs.
    pub masked: Array2<f64>,
    pub mask: Vec<usize>,
}

impl ForwardTrace {
    pub fn refined(&self) -> &Array2<f64> {
        self.states.last().unwrap()
    }
}

pub fn forward(params: &MoreParams, batch: &CellBatch, mask: &[usize]) -> Result<ForwardTrace> {
    batch.validate(params)?;
    check_mask(params, mask)?;
    let n = batch.len();
    let d = params.dims().d;
    let mut adapter_hidden = Vec::new();
    let mut z_m = Vec::new();
    let mut z_f = Array2::zeros((n, d));
    for (m, a) in params.adapters.iter().enumerate() {
        let (h, mut z) = a.forward(batch.raw[m].view());
        for (mut row, &p) in z.rows_mut().into_iter().zip(&batch.present[m]) {
            if !p {
                row.fill(0.0);
            }
        }
        z_f += &(&z * &params.omega[m]);
        adapter_hidden.push(h);
        z_m.push(z);
    }
    let (states, refiner_hidden) = refine_rows(params, z_f.clone(), &batch.batches);
    let y = states.last().unwrap();
    let logits = y.dot(&params.classifier_w.t()) + &params.classifier_b;
    let dec_w = params.decoder_w.select(Axis(0), mask);
    let dec_b = params.decoder_b.select(Axis(0), mask);
    let masked = y.dot(&dec_w.t()) + &dec_b;
    let trace = ForwardTrace { adapter_hidden, z_m, z_f, states, refiner_hidden, logits, masked, mask: mask.to_vec() };
    if trace.refined().iter().chain(&trace.logits).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite value in forward pass".into()));
    }
    Ok(trace)
}

/// Refined embeddings and logits for all cells.
pub fn embed(params: &MoreParams, batch: &CellBatch) -> Result<(Array2<f64>, Array2<f64>)> {
    let t = forward(params, batch, &[])?;
    Ok((t.states.last().unwrap().clone(), t.logits))
}

pub fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e = logits.mapv(|v| (v - max).exp());
    let s = e.sum();
    e / s
}
