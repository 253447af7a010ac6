//! Frozen per-modality transformer encoder.
//!
//! Each gene is a token: its identity embedding plus the gene's normalized
//! expression times a shared value projection. Tokens pass through pre-norm
//! blocks (multi-head self-attention, then a GELU feed-forward layer) and
//! are mean-pooled into one `d_model` vector per cell. Weights come from the
//! seeded generator and are never updated; a SHA-256 content hash taken at
//! creation lets callers prove that.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::io::ParamFile;
use crate::{par, rng_from_seed, Error, Result, Rng};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneSpec {
    pub modality: usize,
    /// Number of gene tokens (the HVGs fed to this modality).
    pub n_tokens: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub seed: u64,
}

pub const DEFAULT_TOKENS: usize = 256;
pub const DEFAULT_D_MODEL: usize = 64;
pub const DEFAULT_LAYERS: usize = 2;
pub const DEFAULT_HEADS: usize = 4;
pub const DEFAULT_FFN_DIM: usize = 3072;

/// Extra scale on the value projection `p`. Log-normalized values reach 5
/// or more, and at unit scale `v_t * p` swamps the gene embedding, so the
/// first layer norm sees nearly the same direction for every token and
/// expression differences are lost.
pub const VALUE_PROJECTION_SCALE: f64 = 0.15;

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            modality: 0,
            n_tokens: DEFAULT_TOKENS,
            d_model: DEFAULT_D_MODEL,
            n_layers: DEFAULT_LAYERS,
            n_heads: DEFAULT_HEADS,
            ffn_dim: DEFAULT_FFN_DIM,
            seed: 0,
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_tokens == 0 || self.d_model == 0 || self.n_heads == 0 || self.ffn_dim == 0 {
            return bad(format!("backbone dims must be positive: {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} is not divisible by {} heads", self.d_model, self.n_heads));
        }
        Ok(())
    }

    /// Output embedding width.
    pub fn output_dim(&self) -> usize {
        self.d_model
    }

    pub const fn parameter_count(&self) -> usize {
        backbone_parameter_count(self.n_tokens, self.d_model, self.n_layers, self.ffn_dim)
    }
}

pub const fn backbone_parameter_count(tokens: usize, d: usize, layers: usize, ffn: usize) -> usize {
    let per_layer = 4 * d // two layer norms
        + 4 * (d * d + d) // q, k, v, o
        + d * ffn + ffn + ffn * d + d;
    tokens * d + d + layers * per_layer
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_scale: Array1<f64>,
    pub ln1_offset: Array1<f64>,
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln2_scale: Array1<f64>,
    pub ln2_offset: Array1<f64>,
    pub ff1: Array2<f64>,
    pub ff1_bias: Array1<f64>,
    pub ff2: Array2<f64>,
    pub ff2_bias: Array1<f64>,
}

impl Block {
    fn tensors(&self) -> [(&'static str, &[f64]); 16] {
        fn sl(a: &Array1<f64>) -> &[f64] {
            a.as_slice().unwrap()
        }
        fn sm(a: &Array2<f64>) -> &[f64] {
            a.as_slice().unwrap()
        }
        [
            ("ln1_scale", sl(&self.ln1_scale)),
            ("ln1_offset", sl(&self.ln1_offset)),
            ("wq", sm(&self.wq)),
            ("bq", sl(&self.bq)),
            ("wk", sm(&self.wk)),
            ("bk", sl(&self.bk)),
            ("wv", sm(&self.wv)),
            ("bv", sl(&self.bv)),
            ("wo", sm(&self.wo)),
            ("bo", sl(&self.bo)),
            ("ln2_scale", sl(&self.ln2_scale)),
            ("ln2_offset", sl(&self.ln2_offset)),
            ("ff1", sm(&self.ff1)),
            ("ff1_bias", sl(&self.ff1_bias)),
            ("ff2", sm(&self.ff2)),
            ("ff2_bias", sl(&self.ff2_bias)),
        ]
    }
}

/// Immutable encoder weights. There is deliberately no `&mut` access.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    spec: BackboneSpec,
    gene_embedding: Array2<f64>,
    value_projection: Array1<f64>,
    blocks: Vec<Block>,
    hash: String,
}

fn normal_matrix(rng: &mut Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let scale = 1.0 / (fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * scale
    })
}

fn normal_vector(rng: &mut Rng, len: usize, fan_in: usize) -> Array1<f64> {
    normal_matrix(rng, 1, len, fan_in).into_shape_with_order(len).unwrap()
}

/// Draws every weight from the seeded generator, scaled by
/// `1/sqrt(fan_in)`; layer norms start at unit scale and zero offset. The
/// value projection is further scaled by [`VALUE_PROJECTION_SCALE`].
pub fn init_frozen_backbone(spec: BackboneSpec) -> Result<BackboneWeights> {
    spec.validate()?;
    let seed = spec.seed ^ (spec.modality as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = rng_from_seed(seed);
    let (d, f) = (spec.d_model, spec.ffn_dim);
    let gene_embedding = normal_matrix(&mut rng, spec.n_tokens, d, 1);
    let value_projection = normal_vector(&mut rng, d, 1) * VALUE_PROJECTION_SCALE;
    let blocks = (0..spec.n_layers)
        .map(|_| Block {
            ln1_scale: Array1::ones(d),
            ln1_offset: Array1::zeros(d),
            wq: normal_matrix(&mut rng, d, d, d),
            bq: normal_vector(&mut rng, d, d),
            wk: normal_matrix(&mut rng, d, d, d),
            bk: normal_vector(&mut rng, d, d),
            wv: normal_matrix(&mut rng, d, d, d),
            bv: normal_vector(&mut rng, d, d),
            wo: normal_matrix(&mut rng, d, d, d),
            bo: normal_vector(&mut rng, d, d),
            ln2_scale: Array1::ones(d),
            ln2_offset: Array1::zeros(d),
            ff1: normal_matrix(&mut rng, d, f, d),
            ff1_bias: normal_vector(&mut rng, f, d),
            ff2: normal_matrix(&mut rng, f, d, f),
            ff2_bias: normal_vector(&mut rng, d, f),
        })
        .collect();
    let mut w = BackboneWeights {
        spec,
        gene_embedding,
        value_projection,
        blocks,
        hash: String::new(),
    };
    w.hash = w.content_hash();
    Ok(w)
}

fn layer_norm(x: &Array2<f64>, scale: &Array1<f64>, offset: &Array1<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.iter_mut()
            .zip(scale.iter().zip(offset))
            .for_each(|(v, (g, b))| *v = (*v - mean) * inv * g + b);
    }
    out
}

/// `e^x` by range reduction and a degree-12 Taylor polynomial, within a
/// few ulps of libm over the clamped range. It is branch free, so loops over
/// it vectorize, which libm calls do not.
#[inline(always)]
fn fast_exp(x: f64) -> f64 {
    const SHIFT: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52, rounds to an integer
    const LN2_HI: f64 = 0.693_147_180_369_123_8;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    // clamp keeps NaN, so a diverging run still surfaces as NaN
    let x = x.clamp(-708.0, 709.0);
    let t = x * std::f64::consts::LOG2_E + SHIFT;
    let kf = t - SHIFT;
    let r = (x - kf * LN2_HI) - kf * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (1.0 / 2.0
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0
                        + r * (1.0 / 120.0
                            + r * (1.0 / 720.0
                                + r * (1.0 / 5_040.0
                                    + r * (1.0 / 40_320.0
                                        + r * (1.0 / 362_880.0
                                            + r * (1.0 / 3_628_800.0
                                                + r * (1.0 / 39_916_800.0 + r * (1.0 / 479_001_600.0))))))))))));
    // the integer k sits in the low mantissa bits of t
    let bits = t.to_bits().wrapping_sub(SHIFT.to_bits()).wrapping_add(1023) << 52;
    p * f64::from_bits(bits)
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let z = C * (x + 0.044715 * x * x * x);
    let tanh = 1.0 - 2.0 / (fast_exp(2.0 * z) + 1.0);
    0.5 * x * (1.0 + tanh)
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| fast_exp(v - max));
        let s = row.sum();
        row /= s;
    }
}

impl BackboneWeights {
    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// Hash recorded when the weights were created.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    fn named_tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("gene_embedding".into(), self.gene_embedding.as_slice().unwrap()),
            ("value_projection".into(), self.value_projection.as_slice().unwrap()),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, t) in b.tensors() {
                out.push((format!("layer{l}.{name}"), t));
            }
        }
        out
    }

    /// SHA-256 over every weight in a fixed order, as lowercase hex.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for v in t {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Token matrix (G x d_model) for one cell.
    fn tokens(&self, x: ArrayView1<f64>) -> Array2<f64> {
        let mut t = self.gene_embedding.clone();
        for (mut row, &v) in t.rows_mut().into_iter().zip(x) {
            row.scaled_add(v, &self.value_projection);
        }
        t
    }

    fn block_forward(&self, b: &Block, x: &mut Array2<f64>) {
        let (g, d) = x.dim();
        let heads = self.spec.n_heads;
        let dh = d / heads;
        let h = layer_norm(x, &b.ln1_scale, &b.ln1_offset);
        let q = h.dot(&b.wq) + &b.bq;
        let k = h.dot(&b.wk) + &b.bk;
        let v = h.dot(&b.wv) + &b.bv;
        let mut concat = Array2::zeros((g, d));
        let scale = 1.0 / (dh as f64).sqrt();
        for head in 0..heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut scores);
            concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
        }
        *x += &(concat.dot(&b.wo) + &b.bo);

        let h = layer_norm(x, &b.ln2_scale, &b.ln2_offset);
        let mut hidden = h.dot(&b.ff1) + &b.ff1_bias;
        hidden.mapv_inplace(gelu);
        *x += &(hidden.dot(&b.ff2) + &b.ff2_bias);
    }

    /// Encodes one cell's normalized expression over the G token genes.
    pub fn encode(&self, x_row: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x_row.len() != self.spec.n_tokens {
            return Err(Error::Dimension(format!(
                "backbone m{} expects {} tokens, got {}",
                self.spec.modality,
                self.spec.n_tokens,
                x_row.len()
            )));
        }
        if x_row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite backbone input".into()));
        }
        let mut t = self.tokens(x_row);
        for b in &self.blocks {
            self.block_forward(b, &mut t);
        }
        Ok(t.mean_axis(Axis(0)).unwrap())
    }

    /// Row-wise [`BackboneWeights::encode`]; rows never interact.
    pub fn encode_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let rows = par::map_range(x.nrows(), |i| self.encode(x.row(i)));
        let mut out = Array2::zeros((x.nrows(), self.spec.d_model));
        for (i, r) in rows.into_iter().enumerate() {
            out.row_mut(i).assign(&r?);
        }
        Ok(out)
    }

    /// Appends `backbone.m{m}.*` sections, including a `spec` section
    /// `[tokens, d_model, layers, heads, ffn_dim, seed]`.
    pub fn export(&self, file: &mut ParamFile) {
        let m = self.spec.modality;
        let s = &self.spec;
        file.push(
            format!("backbone.m{m}.spec"),
            vec![s.n_tokens as f64, s.d_model as f64, s.n_layers as f64, s.n_heads as f64, s.ffn_dim as f64, s.seed as f64],
        );
        for (name, t) in self.named_tensors() {
            file.push(format!("backbone.m{m}.{name}"), t.to_vec());
        }
    }

    /// Loads modality `m` from a parameter file written by
    /// [`BackboneWeights::export`] (or any checkpoint in that layout).
    pub fn import(file: &ParamFile, m: usize) -> Result<Self> {
        let spec_v = file.require(&format!("backbone.m{m}.spec"))?;
        if spec_v.len() != 6 {
            return Err(Error::InvalidArgument("backbone spec section must have 6 entries".into()));
        }
        let spec = BackboneSpec {
            modality: m,
            n_tokens: spec_v[0] as usize,
            d_model: spec_v[1] as usize,
            n_layers: spec_v[2] as usize,
            n_heads: spec_v[3] as usize,
            ffn_dim: spec_v[4] as usize,
            seed: spec_v[5] as u64,
        };
        let mut w = init_frozen_backbone(spec)?;
        let fetch = |name: &str, len: usize| -> Result<Vec<f64>> {
            let v = file.require(&format!("backbone.m{m}.{name}"))?;
            if v.len() != len {
                return Err(Error::Dimension(format!("backbone.m{m}.{name}: {} values, expected {len}", v.len())));
            }
            Ok(v.to_vec())
        };
        let names: Vec<(String, usize)> = w.named_tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect();
        let mut loaded = Vec::with_capacity(names.len());
        for (n, len) in &names {
            loaded.push(fetch(n, *len)?);
        }
        let mut it = loaded.into_iter();
        let mut next2 = |shape: (usize, usize)| Array2::from_shape_vec(shape, it.next().unwrap()).unwrap();
        let (g, d, f) = (spec.n_tokens, spec.d_model, spec.ffn_dim);
        w.gene_embedding = next2((g, d));
        w.value_projection = next2((1, d)).into_shape_with_order(d).unwrap();
        for l in 0..spec.n_layers {
            let v = |a: Array2<f64>| {
                let n = a.len();
                a.into_shape_with_order(n).unwrap()
            };
            w.blocks[l] = Block {
                ln1_scale: v(next2((1, d))),
                ln1_offset: v(next2((1, d))),
                wq: next2((d, d)),
                bq: v(next2((1, d))),
                wk: next2((d, d)),
                bk: v(next2((1, d))),
                wv: next2((d, d)),
                bv: v(next2((1, d))),
                wo: next2((d, d)),
                bo: v(next2((1, d))),
                ln2_scale: v(next2((1, d))),
                ln2_offset: v(next2((1, d))),
                ff1: next2((d, f)),
                ff1_bias: v(next2((1, f))),
                ff2: next2((f, d)),
                ff2_bias: v(next2((1, d))),
            };
        }
        w.hash = w.content_hash();
        Ok(w)
    }

    /// Same weights with token rows reordered by `perm` (row `i` of the
    /// result is row `perm[i]` of `self`). Test support for the
    /// token-permutation symmetry.
    pub fn with_permuted_tokens(&self, perm: &[usize]) -> Self {
        let mut w = self.clone();
        w.gene_embedding = self.gene_embedding.select(Axis(0), perm);
        w.hash = w.content_hash();
        w
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn small(seed: u64) -> BackboneWeights {
        init_frozen_backbone(BackboneSpec {
            n_tokens: 12,
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 32,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn input(seed: u64, n: usize) -> Array1<f64> {
        let mut rng = rng_from_seed(seed);
        Array1::from_shape_fn(n, |_| rng.random_range(0.0..3.0))
    }

    #[test]
    fn hash_depends_on_seed_only() {
        assert_eq!(small(1).hash(), small(1).hash());
        assert_ne!(small(1).hash(), small(2).hash());
        assert_eq!(small(1).hash(), small(1).content_hash());
    }

    #[test]
    fn heads_must_divide_width() {
        let spec = BackboneSpec { d_model: 64, n_heads: 5, ..Default::default() };
        assert!(init_frozen_backbone(spec).is_err());
    }

    #[test]
    fn encode_is_deterministic() {
        let w = small(3);
        let x = input(0, 12);
        assert_eq!(w.encode(x.view()).unwrap(), w.encode(x.view()).unwrap());
    }

    #[test]
    fn token_permutation_symmetry() {
        let w = small(3);
        let x = input(1, 12);
        let mut perm: Vec<usize> = (0..12).collect();
        perm.swap(2, 7);
        let wp = w.with_permuted_tokens(&perm);
        let xp = x.select(Axis(0), &perm);
        let a = w.encode(x.view()).unwrap();
        let b = wp.encode(xp.view()).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_is_pure_identity_tokens() {
        let w = small(4);
        let z = w.encode(Array1::zeros(12).view()).unwrap();
        assert!(z.iter().all(|v| v.is_finite()));
        // with zero values the tokens are exactly the identity embeddings
        let mut t = w.gene_embedding.clone();
        for b in &w.blocks {
            w.block_forward(b, &mut t);
        }
        assert_eq!(t.mean_axis(Axis(0)).unwrap(), z);
    }

    #[test]
    fn rejects_bad_input() {
        let w = small(5);
        assert!(w.encode(Array1::zeros(11).view()).is_err());
        let mut x = Array1::zeros(12);
        x[3] = f64::NAN;
        assert!(w.encode(x.view()).is_err());
    }

    #[test]
    fn batch_matches_rows() {
        let w = small(6);
        let mut rng = rng_from_seed(9);
        let x = Array2::from_shape_fn((5, 12), |_| rng.random_range(0.0..2.0));
        let batch = w.encode_batch(x.view()).unwrap();
        for i in 0..5 {
            assert_eq!(batch.row(i), w.encode(x.row(i)).unwrap());
        }
    }

    #[test]
    fn small_perturbation_small_change() {
        let w = small(7);
        let x = input(2, 12);
        let mut rng = rng_from_seed(11);
        for _ in 0..10 {
            let mut delta: Array1<f64> = Array1::from_shape_fn(12, |_| rng.random_range(-1.0..1.0));
            let norm = delta.dot(&delta).sqrt();
            delta *= 1e-6 / norm;
            let a = w.encode(x.view()).unwrap();
            let b = w.encode((&x + &delta).view()).unwrap();
            let change = (&a - &b).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(change <= 1e-3, "{change}");
        }
    }

    #[test]
    fn export_import_roundtrip() {
        let w = small(8);
        let mut f = ParamFile::default();
        w.export(&mut f);
        let back = BackboneWeights::import(&ParamFile::from_bytes(&f.to_bytes()).unwrap(), 0).unwrap();
        assert_eq!(back, w);
    }

    #[test]
    fn default_parameter_count() {
        let w = init_frozen_backbone(BackboneSpec::default()).unwrap();
        assert_eq!(w.parameter_count(), BackboneSpec::default().parameter_count());
    }

    #[test]
    fn fast_exp_matches_libm() {
        for i in 0..20_001 {
            let x = -700.0 + 0.07 * i as f64 + 1e-3 * (i % 7) as f64;
            let (a, e) = (fast_exp(x), x.exp());
            assert!(((a - e) / e).abs() < 1e-15, "{x}: {a} vs {e}");
        }
        assert_eq!(fast_exp(0.0), 1.0);
        assert!(fast_exp(-1e4) < 1e-300);
        assert!(fast_exp(f64::NAN).is_nan());
        assert!((gelu(1.0) - 0.841_191_990_608_276_8).abs() < 1e-12);
    }
}
