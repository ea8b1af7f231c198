use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use sceneslots_core::autodiff::checkpoint::{load_checkpoint, save_checkpoint};
use sceneslots_core::autodiff::{ops, ParamStore, Tensor};
use sceneslots_core::decoder::{mixture_loglik, normalize_masks};
use sceneslots_core::evaluation::{ari, pca_project};

fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor<f64>> {
    let n: usize = shape.iter().product();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn shape3() -> impl Strategy<Value = Vec<usize>> {
    (1usize..5, 1usize..5, 1usize..6).prop_map(|(a, b, c)| vec![a, b, c])
}

fn labels(n: usize, k: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..k, n)
}

/// (x [C,H,W], means [K,C,H,W], logits [K,1,H,W]).
fn mixture_case() -> impl Strategy<Value = (Tensor<f64>, Tensor<f64>, Tensor<f64>)> {
    (1usize..6, prop::sample::select(vec![1usize, 3]), 1usize..6, 1usize..6).prop_flat_map(|(k, c, h, w)| {
        (
            tensor(vec![c, h, w], 0.0, 1.0),
            tensor(vec![k, c, h, w], -0.2, 1.2),
            tensor(vec![k, 1, h, w], -8.0, 8.0),
        )
    })
}

fn permuted(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let per = t.len() / perm.len();
    let data = perm.iter().flat_map(|&p| t.data()[p * per..(p + 1) * per].to_vec()).collect();
    Tensor::new(t.shape().to_vec(), data).unwrap()
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(t in shape3().prop_flat_map(|s| tensor(s, -30.0, 30.0)), axis in 0usize..3) {
        let s = ops::softmax(&t, axis).unwrap();
        let summed = ops::sum_axis(&s, axis).unwrap();
        for v in summed.data() {
            prop_assert!((v - 1.0).abs() < 1e-12);
        }
        let ls = ops::log_softmax(&t, axis).unwrap();
        for (a, b) in ls.data().iter().zip(s.data()) {
            prop_assert!((a.exp() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn logsumexp_is_bounded_by_the_max(t in shape3().prop_flat_map(|s| tensor(s, -700.0, 700.0)), axis in 0usize..3) {
        let lse = ops::logsumexp(&t, axis).unwrap();
        let n = t.shape()[axis] as f64;
        let s = t.shape();
        let (outer, inner): (usize, usize) = (s[..axis].iter().product(), s[axis + 1..].iter().product());
        for o in 0..outer {
            for i in 0..inner {
                let max = (0..s[axis]).map(|a| t.data()[(o * s[axis] + a) * inner + i]).fold(f64::MIN, f64::max);
                let v = lse.data()[o * inner + i];
                prop_assert!(v.is_finite());
                prop_assert!(v >= max - 1e-9 && v <= max + n.ln() + 1e-9);
            }
        }
    }

    #[test]
    fn layer_norm_standardizes(t in tensor(vec![3, 4, 5], -5.0, 5.0)) {
        let y = ops::layer_norm(&t, 1).unwrap();
        for (src, row) in t.data().chunks(20).zip(y.data().chunks(20)) {
            let var_in = {
                let m = src.iter().sum::<f64>() / 20.0;
                src.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 20.0
            };
            prop_assume!(var_in > 1e-2);
            let m = row.iter().sum::<f64>() / 20.0;
            let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 20.0;
            prop_assert!(m.abs() < 1e-10);
            prop_assert!((v - var_in / (var_in + 1e-5)).abs() < 1e-9);
        }
    }

    #[test]
    fn matmul_matches_naive(
        (a, b) in (1usize..7, 1usize..7, 1usize..7)
            .prop_flat_map(|(m, k, n)| (tensor(vec![m, k], -2.0, 2.0), tensor(vec![k, n], -2.0, 2.0)))
    ) {
        let c = ops::matmul(&a, &b).unwrap();
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|l| a.data()[i * k + l] * b.data()[l * n + j]).sum();
                prop_assert!((c.data()[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mixture_is_slot_permutation_invariant((x, means, logits) in mixture_case(), seed in any::<u64>()) {
        let masks = normalize_masks(&logits).unwrap();
        let k = masks.shape()[0];
        let mut perm: Vec<usize> = (0..k).collect();
        let mut s = seed;
        for i in (1..k).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let (pix, total) = mixture_loglik(&x, &means, &masks, 0.1).unwrap();
        let (pix_p, total_p) = mixture_loglik(&x, &permuted(&means, &perm), &permuted(&masks, &perm), 0.1).unwrap();
        prop_assert_eq!(total.to_bits(), total_p.to_bits());
        prop_assert_eq!(pix, pix_p);
        let p = masks.len() / k;
        for i in 0..p {
            let sum: f64 = (0..k).map(|j| masks.data()[j * p + i]).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ari_is_symmetric_and_label_free((a, b) in (1usize..60).prop_flat_map(|n| (labels(n, 5), labels(n, 5))), shift in 1usize..50) {
        let ab = ari(&a, &b).unwrap();
        prop_assert!((ab - ari(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12 && ab >= -1.0 - 1e-12);
        let relabeled: Vec<usize> = a.iter().map(|&v| (4 - v) * 7 + shift).collect();
        prop_assert!((ab - ari(&relabeled, &b).unwrap()).abs() < 1e-12);
        prop_assert_eq!(ari(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn pca_matches_symmetric_eigendecomposition(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 8..40),
        scales in prop::collection::vec(0.1f64..4.0, 4)
    ) {
        let data: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().zip(&scales).map(|(v, s)| v * s).collect()).collect();
        let (n, d) = (data.len(), 4);
        let mean: Vec<f64> = (0..d).map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let centered = DMatrix::from_fn(n, d, |i, j| data[i][j] - mean[j]);
        let cov = centered.transpose() * &centered / (n - 1) as f64;
        let eig = SymmetricEigen::new(cov.clone());
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let l: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        // Power iteration needs separated eigenvalues to converge.
        prop_assume!(l[0] - l[1] > 0.05 * l[0] && l[1] - l[2] > 0.05 * l[0]);
        let trace = cov.trace();
        let p = pca_project(&data).unwrap();
        for c in 0..2 {
            prop_assert!((p.explained[c] - l[c] / trace).abs() < 1e-6);
            let v = eig.eigenvectors.column(order[c]);
            let dot: f64 = (0..d).map(|j| v[j] * p.components[c][j]).sum();
            prop_assert!((dot.abs() - 1.0).abs() < 1e-6, "component {} dot {}", c, dot);
        }
    }

    #[test]
    fn checkpoints_round_trip_bitwise(
        values in prop::collection::vec(
            prop::num::f32::NORMAL | prop::num::f32::SUBNORMAL | prop::num::f32::ZERO | prop::num::f32::INFINITE,
            1..50,
        ),
        other in prop::collection::vec(-1e3f32..1e3, 1..20)
    ) {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::<f32>::new();
        store.insert("a.w", Tensor::new(vec![values.len()], values.clone()).unwrap());
        store.insert("b", Tensor::new(vec![1, other.len()], other.clone()).unwrap());
        let path = dir.path().join("c.bin");
        save_checkpoint(&path, &store).unwrap();
        let back: ParamStore<f32> = load_checkpoint(&path).unwrap();
        let bits = |s: &ParamStore<f32>| -> Vec<(String, Vec<usize>, Vec<u32>)> {
            s.iter()
                .map(|(n, p)| (n.to_string(), p.value.shape().to_vec(), p.value.data().iter().map(|v| v.to_bits()).collect()))
                .collect()
        };
        prop_assert_eq!(bits(&store), bits(&back));
    }
}
