//! Composite objective, analytic gradients and the training loop.

mod backward;
mod loss;
mod optim;

pub use backward::{backward, evaluate_loss, finite_difference_grad, loss_and_grad, max_relative_error, Objective};
pub use loss::{loss_align, loss_ce, loss_intra, loss_masked_mse, loss_supcon, total_loss, LossTerms, LossWeights};
pub use optim::Adam;

use rand::seq::{index, SliceRandom};

use crate::model::{CellBatch, MoreParams, DEFAULT_DEPTH};
use crate::{rng_from_seed, Error, Result, Rng};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub minibatch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Refinement depth T used during and after training.
    pub depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            minibatch: 128,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            depth: DEFAULT_DEPTH,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if self.minibatch < 2 {
            return Err(Error::InvalidArgument("minibatch must be >= 2".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::InvalidArgument("bad optimizer moments".into()));
        }
        Ok(())
    }
}

/// Mean loss terms over one epoch, weighted by minibatch size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub terms: LossTerms,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub params: MoreParams,
    pub history: Vec<EpochLoss>,
}

/// Shuffled minibatches of at least two cells (a short tail joins the
/// previous chunk).
fn minibatches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().unwrap().len() < 2 {
        let tail = out.pop().unwrap();
        out.last_mut().unwrap().extend(tail);
    }
    out
}

/// Sorted random subset of `round(rate·G)` gene positions.
pub fn sample_mask(rng: &mut Rng, n_genes: usize, rate: f64) -> Vec<usize> {
    let k = ((rate * n_genes as f64).round() as usize).min(n_genes);
    let mut m = index::sample(rng, n_genes, k).into_vec();
    m.sort_unstable();
    m
}

pub fn train(params: &MoreParams, data: &CellBatch, cfg: &TrainConfig, w: &LossWeights) -> Result<Trained> {
    cfg.validate()?;
    w.validate()?;
    if data.len() < 2 {
        return Err(Error::InvalidArgument("training needs at least 2 cells".into()));
    }
    if w.needs_labels() && data.labels.iter().all(Option::is_none) {
        return Err(Error::Metadata("label-dependent loss terms are enabled but no cell has a label".into()));
    }
    let mut params = params.clone();
    params.depth = cfg.depth;
    data.validate(&params)?;
    let n_genes = params.dims().n_genes;
    let mut adam = Adam::new(&params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps);
    let mut rng = rng_from_seed(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = LossTerms::default();
        let mut total = 0.0;
        for (b, idx) in minibatches(&order, cfg.minibatch).into_iter().enumerate() {
            let mask = sample_mask(&mut rng, n_genes, w.mask_rate);
            let mb = data.select(&idx);
            let obj = loss_and_grad(&params, &mb, &mask, w).map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("epoch {epoch}, minibatch {b}: {msg}")),
                other => other,
            })?;
            if !obj.total.is_finite() || !obj.terms.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}, minibatch {b}")));
            }
            let frac = idx.len() as f64 / data.len() as f64;
            sum.scaled_add(frac, &obj.terms);
            total += frac * obj.total;
            adam.step(&mut params, &obj.grads);
        }
        history.push(EpochLoss { epoch, terms: sum, total });
    }
    Ok(Trained { params, history })
}
