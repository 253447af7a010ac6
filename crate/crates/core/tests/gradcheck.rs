use more_core::model::{CellBatch, ModelDims, MoreParams};
use more_core::train::{finite_difference_grad, loss_and_grad, max_relative_error, LossWeights};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn instance(seed: u64) -> (MoreParams, CellBatch, Vec<usize>) {
    let (n, d, c, b, m, g) = (8, 16, 3, 2, 2, 10);
    let dims = ModelDims { d, n_modalities: m, n_batches: b, n_classes: c, n_genes: g, depth: 2 };
    let mut params = MoreParams::init(dims, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1000);
    for t in params.tensors_mut() {
        t.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    }
    let raw = (0..m).map(|_| Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))).collect();
    let batches = (0..n).map(|_| rng.random_range(0..b)).collect();
    // every class appears at least twice so the contrastive term is active
    let labels = (0..n).map(|i| Some(i % c)).collect();
    let targets = Array2::from_shape_fn((n, g), |_| rng.random_range(0.0..2.0));
    let mask = vec![0, 3, 7];
    (params, CellBatch::complete(raw, batches, labels, targets), mask)
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let w = LossWeights::default();
    let mut worst = (0.0f64, String::new());
    for seed in 0..20 {
        let (p, batch, mask) = instance(seed);
        let analytic = loss_and_grad(&p, &batch, &mask, &w).unwrap().grads;
        let numeric = finite_difference_grad(&p, &batch, &mask, &w, 1e-5).unwrap();
        let (err, name) = max_relative_error(&analytic, &numeric, 1e-8);
        if err > worst.0 {
            worst = (err, name);
        }
    }
    assert!(worst.0 < 1e-4, "{worst:?}");
}
