use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};

use crate::io::{Embeddings, Provenance};
use crate::{rng_from_seed, Error, Result};

/// Above this size the eigenproblem is solved by block subspace iteration
/// instead of a full dense decomposition.
const DENSE_EIGEN_LIMIT: usize = 400;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    /// features x k, orthonormal columns.
    pub components: Array2<f64>,
    pub explained_variance: Vec<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub means: Array1<f64>,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.components.ncols()
    }

    pub fn transform(&self, x: ArrayView2<f64>) -> Array2<f64> {
        (&x - &self.means).dot(&self.components)
    }

    pub fn inverse_transform(&self, scores: ArrayView2<f64>) -> Array2<f64> {
        scores.dot(&self.components.t()) + &self.means
    }
}

/// Top-`k` principal components of `x` (cells x features) from the sample
/// covariance. Each component is oriented so its largest-magnitude entry
/// is positive.
pub fn pca(x: ArrayView2<f64>, k: usize, seed: u64) -> Result<(PcaModel, Embeddings)> {
    let (n, p) = x.dim();
    if k == 0 || k > n.min(p) {
        return Err(Error::InvalidArgument(format!(
            "cannot take {k} components from a {n} x {p} matrix"
        )));
    }
    let means = x.mean_axis(Axis(0)).unwrap();
    let centered = &x - &means;
    let denom = (n.max(2) - 1) as f64;
    let total_variance: f64 = centered.map_axis(Axis(0), |c| c.dot(&c)).sum() / denom;

    let (mut values, mut components) = if p <= n {
        let cov = centered.t().dot(&centered) / denom;
        top_eigen(&cov, k, seed)
    } else {
        // fewer cells than features: diagonalize the Gram matrix and map back
        let gram = centered.dot(&centered.t()) / denom;
        let (vals, u) = top_eigen(&gram, k, seed);
        let mut v = centered.t().dot(&u);
        for (j, mut col) in v.axis_iter_mut(Axis(1)).enumerate() {
            let norm = col.dot(&col).sqrt();
            if norm > 0.0 && vals[j] > 0.0 {
                col /= norm;
            }
        }
        (vals, v)
    };
    for v in values.iter_mut() {
        *v = v.max(0.0);
    }
    for mut col in components.axis_iter_mut(Axis(1)) {
        let mut best = 0usize;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }
    let ratios = values
        .iter()
        .map(|v| if total_variance > 0.0 { (v / total_variance).min(1.0) } else { 0.0 })
        .collect();
    let model = PcaModel {
        components,
        explained_variance: values,
        explained_variance_ratio: ratios,
        means,
    };
    let scores = centered.dot(&model.components);
    Ok((model, Embeddings::new(scores, Provenance::Pca)))
}

/// Largest `k` eigenpairs of a symmetric PSD matrix, descending.
fn top_eigen(a: &Array2<f64>, k: usize, seed: u64) -> (Vec<f64>, Array2<f64>) {
    if a.nrows() <= DENSE_EIGEN_LIMIT {
        dense_eigen(a, k)
    } else {
        subspace_eigen(a, k, seed)
    }
}

fn to_nalgebra(a: &Array2<f64>) -> DMatrix<f64> {
    let (r, c) = a.dim();
    DMatrix::from_fn(r, c, |i, j| a[[i, j]])
}

fn dense_eigen(a: &Array2<f64>, k: usize) -> (Vec<f64>, Array2<f64>) {
    let eig = nalgebra::SymmetricEigen::new(to_nalgebra(a));
    let mut order: Vec<usize> = (0..a.nrows()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let order = &order[..k];
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = Array2::from_shape_fn((a.nrows(), k), |(r, c)| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Block subspace iteration with Rayleigh-Ritz extraction. The start block
/// is drawn from the seeded generator, so the result is reproducible. The
/// block is twice `k` so the convergence rate depends on the gap to the
/// eigenvalue at `2k` rather than at `k + 1`, and `A Q` is carried through
/// the Ritz rotation so each sweep costs one product with `a`.
fn subspace_eigen(a: &Array2<f64>, k: usize, seed: u64) -> (Vec<f64>, Array2<f64>) {
    const MAX_SWEEPS: usize = 500;
    const REL_TOL: f64 = 1e-12;
    let p = a.nrows();
    let block = (2 * k).max(k + 10).min(p);
    let mut rng = rng_from_seed(seed);
    let mut q = Array2::from_shape_fn((p, block), |_| StandardNormal.sample(&mut rng));
    orthonormalize(&mut q);
    let mut aq = a.dot(&q);
    let mut prev: Vec<f64> = vec![f64::INFINITY; k];
    let mut values = Vec::new();
    for _ in 0..MAX_SWEEPS {
        let mut z = aq;
        orthonormalize(&mut z);
        let az = a.dot(&z);
        let small = z.t().dot(&az);
        let (vals, vecs) = dense_eigen(&small, block);
        q = z.dot(&vecs);
        aq = az.dot(&vecs);
        values = vals[..k].to_vec();
        let scale = values[0].abs().max(f64::MIN_POSITIVE);
        if values.iter().zip(&prev).all(|(v, o)| (v - o).abs() <= REL_TOL * scale) {
            break;
        }
        prev.clone_from(&values);
    }
    (values, q.slice(s![.., ..k]).to_owned())
}

/// Modified Gram-Schmidt, applied twice, on a row-major copy of the columns.
/// Columns that collapse to zero are left at zero.
fn orthonormalize(q: &mut Array2<f64>) {
    let mut t = q.t().as_standard_layout().into_owned();
    let cols = t.nrows();
    for _ in 0..2 {
        for j in 0..cols {
            let (done, mut rest) = t.view_mut().split_at(Axis(0), j);
            let mut cj = rest.row_mut(0);
            for ci in done.rows() {
                let proj = ci.dot(&cj);
                cj.scaled_add(-proj, &ci);
            }
            let norm = cj.dot(&cj).sqrt();
            if norm > 1e-300 {
                cj.mapv_inplace(|v| v / norm);
            } else {
                cj.fill(0.0);
            }
        }
    }
    q.assign(&t.t());
}
