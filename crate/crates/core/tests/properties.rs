use more_core::harmony::{HarmonyConfig, HarmonyState};
use more_core::io::{read_mtx, write_mtx, Orientation};
use more_core::metrics::{ari, batch_entropy, silhouette};
use more_core::model::{fuse, refine, ModelDims, MoreParams, TwoLayer};
use more_core::prep::normalize_log1p;
use more_core::train::{loss_align, loss_ce, loss_intra, loss_masked_mse, loss_supcon};
use more_core::ExpressionMatrix;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::SeedableRng;

fn matrix(rows: usize, cols: usize, lo: f64, hi: f64) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(lo..hi, rows * cols).prop_map(move |v| Array2::from_shape_vec((rows, cols), v).unwrap())
}

fn sized_matrix(rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> impl Strategy<Value = Array2<f64>> {
    (rows, cols).prop_flat_map(|(r, c)| matrix(r, c, -3.0, 3.0))
}

fn dims(d: usize, modalities: usize, depth: usize) -> ModelDims {
    ModelDims { d, n_modalities: modalities, n_batches: 3, n_classes: 2, n_genes: 4, depth }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn harmony_assignments_are_distributions(
        z in sized_matrix(6..30, 2..5),
        k in 1usize..5,
        seed in 0u64..1000,
        lambda in 0.0f64..3.0,
    ) {
        let batches: Vec<usize> = (0..z.nrows()).map(|i| (i * 7 + seed as usize) % 3).collect();
        let cfg = HarmonyConfig { n_clusters: k, lambda_div: lambda, seed, ..HarmonyConfig::default() };
        let mut st = HarmonyState::new(z.view(), &batches, &cfg).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..2 {
            st.round(&mut rng);
            for row in st.r.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn zero_refiner_is_identity(
        z in prop::collection::vec(-5.0f64..5.0, 6),
        batch in 0usize..3,
        depth in 0usize..5,
        seed in 0u64..1000,
    ) {
        let mut p = MoreParams::init(dims(6, 1, depth), seed).unwrap();
        p.refiner = TwoLayer::zeros(6);
        p.batch_emb.mapv_inplace(|_| 0.7);
        let z = Array1::from(z);
        let (out, steps) = refine(&p, z.view(), batch).unwrap();
        prop_assert_eq!(&out, &z);
        prop_assert_eq!(steps.len(), depth + 1);
    }

    #[test]
    fn fusion_is_linear(
        a in matrix(2, 5, -2.0, 2.0),
        b in matrix(2, 5, -2.0, 2.0),
        s in -3.0f64..3.0,
        t in -3.0f64..3.0,
        seed in 0u64..1000,
    ) {
        let mut p = MoreParams::init(dims(5, 2, 1), seed).unwrap();
        p.omega[0].mapv_inplace(|_| 0.3);
        p.omega[1] = Array1::linspace(-1.0, 1.0, 5);
        let mix = &a * s + &b * t;
        let f = |m: &Array2<f64>| fuse(&p, &[Some(m.row(0)), Some(m.row(1))]).unwrap();
        let lhs = f(&mix);
        let rhs = f(&a) * s + f(&b) * t;
        for (x, y) in lhs.iter().zip(&rhs) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        // an absent modality contributes nothing
        let one = fuse(&p, &[Some(a.row(0)), None]).unwrap();
        prop_assert_eq!(one, &p.omega[0] * &a.row(0));
    }

    #[test]
    fn ari_is_symmetric_and_relabel_invariant(
        a in prop::collection::vec(0usize..4, 2..40),
        shift in 1usize..4,
    ) {
        let b: Vec<usize> = a.iter().enumerate().map(|(i, &v)| (v + i) % 3).collect();
        let ab = ari(&a, &b).unwrap();
        prop_assert!((ab - ari(&b, &a).unwrap()).abs() < 1e-12);
        let relabeled: Vec<usize> = a.iter().map(|&v| (v + shift) % 4).collect();
        prop_assert!((ari(&relabeled, &b).unwrap() - ab).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
    }

    #[test]
    fn batch_entropy_ignores_batch_names(
        emb in sized_matrix(8..40, 2..4),
        k in 1usize..10,
        perm in Just([2usize, 0, 1]),
    ) {
        let batches: Vec<usize> = (0..emb.nrows()).map(|i| i % 3).collect();
        let renamed: Vec<usize> = batches.iter().map(|&b| perm[b]).collect();
        let e1 = batch_entropy(emb.view(), &batches, k).unwrap();
        let e2 = batch_entropy(emb.view(), &renamed, k).unwrap();
        prop_assert!((e1 - e2).abs() < 1e-12);
        prop_assert!((-1e-12..=1.0 + 1e-12).contains(&e1));
    }

    #[test]
    fn silhouette_is_rigid_invariant(
        emb in sized_matrix(6..30, 2..4),
        angle in 0.0f64..std::f64::consts::TAU,
        shift in -10.0f64..10.0,
    ) {
        let labels: Vec<usize> = (0..emb.nrows()).map(|i| i % 2).collect();
        let (c, s) = (angle.cos(), angle.sin());
        let mut moved = emb.clone();
        for mut row in moved.rows_mut() {
            let (x, y) = (row[0], row[1]);
            row[0] = c * x - s * y;
            row[1] = s * x + c * y;
            row += shift;
        }
        let s0 = silhouette(emb.view(), &labels).unwrap();
        let s1 = silhouette(moved.view(), &labels).unwrap();
        prop_assert!((s0 - s1).abs() < 1e-8);
        prop_assert!((-1.0..=1.0).contains(&s0));
    }

    #[test]
    fn losses_are_nonnegative(
        emb in matrix(6, 4, -3.0, 3.0),
        other in matrix(6, 4, -3.0, 3.0),
        tau in 0.05f64..2.0,
        label in 0usize..3,
    ) {
        let labels = [0usize, 1, 0, 1, 2, 2];
        prop_assert!(loss_ce(emb.row(0).slice(ndarray::s![..3]), label).unwrap() >= 0.0);
        prop_assert!(loss_supcon(emb.view(), &labels, tau).unwrap() >= 0.0);
        prop_assert!(loss_align(&[other.view()], emb.view()).unwrap() >= 0.0);
        prop_assert!(loss_intra(emb.view(), &labels).unwrap() >= 0.0);
        prop_assert!(loss_masked_mse(emb.row(0), other.row(0)).unwrap() >= 0.0);
    }

    #[test]
    fn mtx_round_trip(
        counts in (1usize..12, 1usize..9).prop_flat_map(|(c, g)| prop::collection::vec(prop_oneof![3 => Just(0.0), 1 => (1u32..50).prop_map(f64::from)], c * g).prop_map(move |v| (c, g, v))),
        transpose in any::<bool>(),
    ) {
        let (c, g, v) = counts;
        let dense = Array2::from_shape_vec((c, g), v).unwrap();
        let genes = (0..g).map(|j| format!("G{j}")).collect();
        let cells = (0..c).map(|i| format!("C{i}")).collect();
        let x = ExpressionMatrix::from_dense(&dense, genes, cells).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (m, gp, bp) = (dir.path().join("m.mtx"), dir.path().join("g.tsv"), dir.path().join("b.tsv"));
        let o = if transpose { Orientation::CellsByGenes } else { Orientation::GenesByCells };
        write_mtx(&x, &m, &gp, &bp, o).unwrap();
        let y = read_mtx(&m, &gp, &bp, o).unwrap();
        prop_assert_eq!(y.to_dense(), dense);
        prop_assert_eq!(y.gene_names(), x.gene_names());
        prop_assert_eq!(y.barcodes(), x.barcodes());
    }

    #[test]
    fn normalization_preserves_target_sum(
        dense in matrix(5, 7, 0.0, 40.0),
        target in 100.0f64..1e5,
    ) {
        let dense = dense.mapv(f64::round);
        let x = ExpressionMatrix::from_dense(
            &dense,
            (0..7).map(|j| format!("G{j}")).collect(),
            (0..5).map(|i| format!("C{i}")).collect(),
        ).unwrap();
        let y = normalize_log1p(&x, target).unwrap().to_dense();
        for (i, row) in y.rows().into_iter().enumerate() {
            let total: f64 = row.iter().map(|v| v.exp_m1()).sum();
            let want = if dense.row(i).sum() > 0.0 { target } else { 0.0 };
            prop_assert!((total - want).abs() <= 1e-9 * target);
        }
    }
}
