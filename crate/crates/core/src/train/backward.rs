//! Analytic gradients of the composite objective.

use ndarray::{Array2, ArrayView2, Axis};

use super::loss::{align_grad, ce_grad, intra_grad, mse_grad, supcon_grad, total_loss, LossTerms, LossWeights};
use crate::model::{forward, CellBatch, ForwardTrace, MoreParams, TwoLayer};
use crate::{Error, Result};

/// Loss terms, weighted total and the gradient of the total with respect
/// to every trainable tensor.
#[derive(Debug, Clone)]
pub struct Objective {
    pub terms: LossTerms,
    pub total: f64,
    pub grads: MoreParams,
}

fn labeled(batch: &CellBatch) -> (Vec<usize>, Vec<usize>) {
    batch.labels.iter().enumerate().filter_map(|(i, l)| l.map(|c| (i, c))).unzip()
}

/// Terms evaluated on a finished forward pass, plus the gradient of the
/// weighted total with respect to the refined embeddings, logits, masked
/// outputs, per-modality embeddings and fused embeddings.
struct TermGrads {
    terms: LossTerms,
    d_refined: Array2<f64>,
    d_logits: Array2<f64>,
    d_masked: Array2<f64>,
    d_zm: Vec<Array2<f64>>,
    d_zf: Array2<f64>,
}

fn term_grads(batch: &CellBatch, trace: &ForwardTrace, w: &LossWeights) -> Result<TermGrads> {
    let y = trace.refined();
    let (idx, labels) = labeled(batch);

    let (ce, mut d_logits) = ce_grad(&trace.logits, &batch.labels);
    d_logits *= w.lambda_ce;

    let mut d_refined = Array2::zeros(y.dim());
    let y_lab = y.select(Axis(0), &idx);
    let supcon = match supcon_grad(y_lab.view(), &labels, w.tau) {
        Ok((v, g)) => {
            scatter_add(&mut d_refined, &idx, g.view(), w.lambda_supcon);
            v
        }
        // a minibatch without positives carries no contrastive signal
        Err(Error::DegenerateBatch(_)) => 0.0,
        Err(e) => return Err(e),
    };
    let (intra, g) = intra_grad(y_lab.view(), &labels);
    scatter_add(&mut d_refined, &idx, g.view(), w.lambda_var);

    let targets = batch.targets.select(Axis(1), &trace.mask);
    let (mse, mut d_masked) = mse_grad(&trace.masked, &targets);
    d_masked *= w.lambda_mse;

    let (align, mut d_zm, mut d_zf) = align_grad(&trace.z_m, &batch.present, trace.z_f.view());
    d_zm.iter_mut().for_each(|g| *g *= w.lambda_align);
    d_zf *= w.lambda_align;

    Ok(TermGrads { terms: LossTerms { ce, supcon, align, intra, mse }, d_refined, d_logits, d_masked, d_zm, d_zf })
}

fn scatter_add(dst: &mut Array2<f64>, rows: &[usize], src: ArrayView2<f64>, scale: f64) {
    for (k, &i) in rows.iter().enumerate() {
        dst.row_mut(i).scaled_add(scale, &src.row(k));
    }
}

/// Loss terms only, through the same code path as [`loss_and_grad`].
pub fn evaluate_loss(params: &MoreParams, batch: &CellBatch, mask: &[usize], w: &LossWeights) -> Result<(LossTerms, f64)> {
    let trace = forward(params, batch, mask)?;
    let terms = term_grads(batch, &trace, w)?.terms;
    Ok((terms, total_loss(&terms, w)))
}

pub fn loss_and_grad(params: &MoreParams, batch: &CellBatch, mask: &[usize], w: &LossWeights) -> Result<Objective> {
    let trace = forward(params, batch, mask)?;
    backward(params, batch, &trace, w)
}

/// Backpropagates the weighted objective through heads, refinement loop,
/// fusion and adapters. The frozen encoders are upstream of the cached
/// inputs and receive nothing.
pub fn backward(params: &MoreParams, batch: &CellBatch, trace: &ForwardTrace, w: &LossWeights) -> Result<Objective> {
    let tg = term_grads(batch, trace, w)?;
    let mut grads = MoreParams::zeros(params.dims());
    let y = trace.refined();

    // heads
    grads.classifier_w = tg.d_logits.t().dot(y);
    grads.classifier_b = tg.d_logits.sum_axis(Axis(0));
    let mut dy = tg.d_refined;
    dy += &tg.d_logits.dot(&params.classifier_w);
    for (k, &t) in trace.mask.iter().enumerate() {
        let col = tg.d_masked.column(k);
        grads.decoder_w.row_mut(t).scaled_add(1.0, &col.dot(y).view());
        grads.decoder_b[t] += col.sum();
        for (mut row, &g) in dy.rows_mut().into_iter().zip(col) {
            row.scaled_add(g, &params.decoder_w.row(t));
        }
    }

    // refinement: y_{t+1} = y_t + R2·tanh(R1·(y_t − b) + r1) + r2
    let b_sel = params.batch_emb.select(Axis(0), &batch.batches);
    let r = &params.refiner;
    for t in (0..params.depth).rev() {
        let h = &trace.refiner_hidden[t];
        let u = &trace.states[t] - &b_sel;
        grads.refiner.w2 += &dy.t().dot(h);
        grads.refiner.b2 += &dy.sum_axis(Axis(0));
        let da = dy.dot(&r.w2) * &h.mapv(|v| 1.0 - v * v);
        grads.refiner.w1 += &da.t().dot(&u);
        grads.refiner.b1 += &da.sum_axis(Axis(0));
        let du = da.dot(&r.w1);
        for (k, &b) in batch.batches.iter().enumerate() {
            let mut row = grads.batch_emb.row_mut(b);
            row -= &du.row(k);
        }
        dy += &du;
    }

    // fusion and adapters
    let dzf = dy + &tg.d_zf;
    for m in 0..params.adapters.len() {
        let mut dz = &dzf * &params.omega[m] + &tg.d_zm[m];
        for (mut row, &p) in dz.rows_mut().into_iter().zip(&batch.present[m]) {
            if !p {
                row.fill(0.0);
            }
        }
        // absent rows of z_m are zero, so they add nothing here
        grads.omega[m] = (&dzf * &trace.z_m[m]).sum_axis(Axis(0));
        adapter_backward(&params.adapters[m], &mut grads.adapters[m], &batch.raw[m], &trace.adapter_hidden[m], &dz);
    }

    let names: Vec<String> = grads.tensors().into_iter().filter(|(_, t)| t.iter().any(|v| !v.is_finite())).map(|(n, _)| n).collect();
    if let Some(name) = names.first() {
        return Err(Error::Numerical(format!("non-finite gradient in {name}")));
    }
    let total = total_loss(&tg.terms, w);
    Ok(Objective { terms: tg.terms, total, grads })
}

fn adapter_backward(a: &TwoLayer, g: &mut TwoLayer, x: &Array2<f64>, h: &Array2<f64>, dz: &Array2<f64>) {
    g.w2 = dz.t().dot(h);
    g.b2 = dz.sum_axis(Axis(0));
    let da = dz.dot(&a.w2) * &h.mapv(|v| 1.0 - v * v);
    g.w1 = da.t().dot(x);
    g.b1 = da.sum_axis(Axis(0));
}

/// Central finite differences of the weighted objective for every
/// trainable entry. Reference for checking [`backward`].
pub fn finite_difference_grad(params: &MoreParams, batch: &CellBatch, mask: &[usize], w: &LossWeights, h: f64) -> Result<MoreParams> {
    let mut out = MoreParams::zeros(params.dims());
    let mut probe = params.clone();
    let n_tensors = params.tensors().len();
    for k in 0..n_tensors {
        let len = params.tensors()[k].1.len();
        for j in 0..len {
            let orig = probe.tensors_mut()[k][j];
            probe.tensors_mut()[k][j] = orig + h;
            let (_, plus) = evaluate_loss(&probe, batch, mask, w)?;
            probe.tensors_mut()[k][j] = orig - h;
            let (_, minus) = evaluate_loss(&probe, batch, mask, w)?;
            probe.tensors_mut()[k][j] = orig;
            out.tensors_mut()[k][j] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(out)
}

/// Largest entrywise `|a − n| / max(|a|, |n|, floor)` and the tensor where
/// it occurs.
pub fn max_relative_error(analytic: &MoreParams, numeric: &MoreParams, floor: f64) -> (f64, String) {
    let mut worst = (0.0, String::new());
    for ((name, a), (_, n)) in analytic.tensors().into_iter().zip(numeric.tensors()) {
        for (x, y) in a.iter().zip(n) {
            let err = (x - y).abs() / x.abs().max(y.abs()).max(floor);
            if err > worst.0 || err.is_nan() {
                worst = (err, name.clone());
            }
        }
    }
    worst
}
