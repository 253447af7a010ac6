//! Objective terms and their gradients with respect to their inputs.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_ce: f64,
    pub lambda_supcon: f64,
    pub lambda_align: f64,
    pub lambda_var: f64,
    pub lambda_mse: f64,
    pub tau: f64,
    pub mask_rate: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ce: 1.0,
            lambda_supcon: 0.5,
            lambda_align: 0.5,
            lambda_var: 0.1,
            lambda_mse: 0.5,
            tau: 0.1,
            mask_rate: 0.15,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let lambdas = [self.lambda_ce, self.lambda_supcon, self.lambda_align, self.lambda_var, self.lambda_mse];
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and >= 0: {lambdas:?}")));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::InvalidArgument(format!("temperature must be > 0, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.mask_rate) {
            return Err(Error::InvalidArgument(format!("mask rate must be in [0, 1), got {}", self.mask_rate)));
        }
        Ok(())
    }

    /// True when any term that needs labels has positive weight.
    pub fn needs_labels(&self) -> bool {
        self.lambda_ce > 0.0 || self.lambda_supcon > 0.0 || self.lambda_var > 0.0
    }
}

/// Unweighted values of each term.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossTerms {
    pub ce: f64,
    pub supcon: f64,
    pub align: f64,
    pub intra: f64,
    pub mse: f64,
}

impl LossTerms {
    pub fn is_finite(&self) -> bool {
        [self.ce, self.supcon, self.align, self.intra, self.mse].iter().all(|v| v.is_finite())
    }

    pub(crate) fn scaled_add(&mut self, w: f64, other: &LossTerms) {
        self.ce += w * other.ce;
        self.supcon += w * other.supcon;
        self.align += w * other.align;
        self.intra += w * other.intra;
        self.mse += w * other.mse;
    }
}

pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> f64 {
    w.lambda_ce * terms.ce
        + w.lambda_supcon * terms.supcon
        + w.lambda_align * terms.align
        + w.lambda_var * terms.intra
        + w.lambda_mse * terms.mse
}

fn log_softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits.mapv(|v| v - lse)
}

/// `−log softmax(logits)[label]`.
pub fn loss_ce(logits: ArrayView1<f64>, label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!("label {label} out of range ({})", logits.len())));
    }
    Ok(-log_softmax(logits)[label])
}

/// Mean cross-entropy over labeled rows and its gradient (zero rows for
/// unlabeled cells). No labeled rows gives 0.
pub(crate) fn ce_grad(logits: &Array2<f64>, labels: &[Option<usize>]) -> (f64, Array2<f64>) {
    let n_lab = labels.iter().flatten().count();
    let mut grad = Array2::zeros(logits.dim());
    if n_lab == 0 {
        return (0.0, grad);
    }
    let inv = 1.0 / n_lab as f64;
    let mut loss = 0.0;
    for (i, y) in labels.iter().enumerate() {
        let Some(y) = *y else { continue };
        let ls = log_softmax(logits.row(i));
        loss -= ls[y];
        let mut g = grad.row_mut(i);
        g.assign(&ls.mapv(|v| v.exp() * inv));
        g[y] -= inv;
    }
    (loss * inv, grad)
}

/// Supervised contrastive loss on L2-normalized rows.
pub fn loss_supcon(emb: ArrayView2<f64>, labels: &[usize], tau: f64) -> Result<f64> {
    supcon_grad(emb, labels, tau).map(|(l, _)| l)
}

pub(crate) fn supcon_grad(emb: ArrayView2<f64>, labels: &[usize], tau: f64) -> Result<(f64, Array2<f64>)> {
    let n = emb.nrows();
    if labels.len() != n {
        return Err(Error::Dimension(format!("{} labels for {n} embeddings", labels.len())));
    }
    if n < 2 {
        return Err(Error::DegenerateBatch("supervised contrastive loss needs at least 2 samples".into()));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be > 0, got {tau}")));
    }
    let norms: Array1<f64> = emb.rows().into_iter().map(|r| r.dot(&r).sqrt().max(1e-12)).collect();
    let zhat = &emb / &norms.view().insert_axis(Axis(1));
    let sim = zhat.dot(&zhat.t()) / tau;

    let anchors: Vec<usize> = (0..n).filter(|&i| (0..n).any(|p| p != i && labels[p] == labels[i])).collect();
    if anchors.is_empty() {
        return Err(Error::DegenerateBatch("no sample has a same-label partner".into()));
    }
    let inv_a = 1.0 / anchors.len() as f64;
    let mut loss = 0.0;
    // gradient with respect to the similarity matrix
    let mut gs = Array2::<f64>::zeros((n, n));
    for &i in &anchors {
        let row = sim.row(i);
        let max = (0..n).filter(|&a| a != i).map(|a| row[a]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).filter(|&a| a != i).map(|a| (row[a] - max).exp()).sum();
        let lse = max + denom.ln();
        let pos: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        let inv_p = 1.0 / pos.len() as f64;
        loss += lse - inv_p * pos.iter().map(|&p| row[p]).sum::<f64>();
        for a in (0..n).filter(|&a| a != i) {
            gs[[i, a]] += inv_a * (row[a] - lse).exp();
        }
        for &p in &pos {
            gs[[i, p]] -= inv_a * inv_p;
        }
    }
    // s = ẑ ẑᵀ / τ
    let gz = (gs.dot(&zhat) + gs.t().dot(&zhat)) / tau;
    let mut grad = Array2::zeros((n, emb.ncols()));
    for i in 0..n {
        let z = zhat.row(i);
        let g = gz.row(i);
        let proj = z.dot(&g);
        grad.row_mut(i).assign(&((&g - &(&z * proj)) / norms[i]));
    }
    Ok((loss * inv_a, grad))
}

/// Mean over modalities and cells of `‖z_m − z_f‖² / d` (all present).
pub fn loss_align(z_m: &[ArrayView2<f64>], z_f: ArrayView2<f64>) -> Result<f64> {
    if z_m.is_empty() {
        return Err(Error::InvalidArgument("alignment needs at least one modality".into()));
    }
    let owned: Vec<Array2<f64>> = z_m.iter().map(|z| z.to_owned()).collect();
    let present: Vec<Vec<bool>> = z_m.iter().map(|z| vec![true; z.nrows()]).collect();
    for z in z_m {
        if z.dim() != z_f.dim() {
            return Err(Error::Dimension(format!("modality embedding {:?} vs fused {:?}", z.dim(), z_f.dim())));
        }
    }
    Ok(align_grad(&owned, &present, z_f).0)
}

/// Value, gradients per modality, and gradient with respect to `z_f`, over
/// present (modality, cell) pairs.
pub(crate) fn align_grad(
    z_m: &[Array2<f64>],
    present: &[Vec<bool>],
    z_f: ArrayView2<f64>,
) -> (f64, Vec<Array2<f64>>, Array2<f64>) {
    let d = z_f.ncols() as f64;
    let count = present.iter().flatten().filter(|&&p| p).count();
    let mut gm: Vec<Array2<f64>> = z_m.iter().map(|z| Array2::zeros(z.dim())).collect();
    let mut gf = Array2::zeros(z_f.dim());
    if count == 0 {
        return (0.0, gm, gf);
    }
    let scale = 1.0 / (count as f64 * d);
    let mut loss = 0.0;
    for (m, z) in z_m.iter().enumerate() {
        for i in 0..z.nrows() {
            if !present[m][i] {
                continue;
            }
            let diff = &z.row(i) - &z_f.row(i);
            loss += diff.dot(&diff);
            let g = diff * (2.0 * scale);
            gm[m].row_mut(i).assign(&g);
            let mut f = gf.row_mut(i);
            f -= &g;
        }
    }
    (loss * scale, gm, gf)
}

/// Mean over present classes of the within-class mean squared distance to
/// the class centroid.
pub fn loss_intra(emb: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.len() != emb.nrows() {
        return Err(Error::Dimension(format!("{} labels for {} embeddings", labels.len(), emb.nrows())));
    }
    if labels.is_empty() {
        return Err(Error::InvalidArgument("intra-class loss needs labeled samples".into()));
    }
    Ok(intra_grad(emb, labels).0)
}

pub(crate) fn intra_grad(emb: ArrayView2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let mut grad = Array2::zeros(emb.dim());
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &c) in labels.iter().enumerate() {
        members[c].push(i);
    }
    let groups: Vec<&Vec<usize>> = members.iter().filter(|g| !g.is_empty()).collect();
    if groups.is_empty() {
        return (0.0, grad);
    }
    let inv_c = 1.0 / groups.len() as f64;
    let mut loss = 0.0;
    for g in groups {
        let rows = emb.select(Axis(0), g);
        let mu = rows.mean_axis(Axis(0)).unwrap();
        let inv_n = 1.0 / g.len() as f64;
        for (k, &i) in g.iter().enumerate() {
            let diff = &rows.row(k) - &mu;
            loss += inv_c * inv_n * diff.dot(&diff);
            grad.row_mut(i).assign(&(diff * (2.0 * inv_c * inv_n)));
        }
    }
    (loss, grad)
}

/// `(1/|M|)·Σ (x̂ − x)²`, or 0 for an empty mask.
pub fn loss_masked_mse(pred: ArrayView1<f64>, target: ArrayView1<f64>) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Dimension(format!("{} predictions for {} targets", pred.len(), target.len())));
    }
    let p = pred.insert_axis(Axis(0)).to_owned();
    let t = target.insert_axis(Axis(0)).to_owned();
    Ok(mse_grad(&p, &t).0)
}

/// Mean over cells of the per-cell masked MSE.
pub(crate) fn mse_grad(pred: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
    let (n, k) = pred.dim();
    if n == 0 || k == 0 {
        return (0.0, Array2::zeros(pred.dim()));
    }
    let diff = pred - target;
    let scale = 1.0 / (n * k) as f64;
    let loss = diff.iter().map(|v| v * v).sum::<f64>() * scale;
    (loss, diff * (2.0 * scale))
}
