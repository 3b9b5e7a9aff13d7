mod common;

use common::oracles;
use common::{random_matrix, rng};
use oftta::metrics::{accuracy, layer_similarity, linear_cka, macro_f1, mean_entropy, ConfusionMatrix};
use oftta::normalization::NormStrategy;
use oftta::tensor::Matrix;
use proptest::prelude::*;
use rand::Rng;

fn cm_from(truth: &[usize], pred: &[usize], k: usize) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::new(k);
    cm.record_all(truth, pred);
    cm
}

fn random_labels(r: &mut rand_chacha::ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| r.random_range(0..k)).collect()
}

#[test]
fn accuracy_matches_counting() {
    let mut r = rng(20);
    for _ in 0..100 {
        let k = r.random_range(2..7);
        let n = r.random_range(1..60);
        let truth = random_labels(&mut r, n, k);
        let pred = random_labels(&mut r, n, k);
        let hits = truth.iter().zip(&pred).filter(|(a, b)| a == b).count();
        assert_eq!(accuracy(&cm_from(&truth, &pred, k)).unwrap(), hits as f64 / n as f64);
    }
}

#[test]
fn macro_f1_examples() {
    assert_eq!(macro_f1(&cm_from(&[0, 1, 2], &[0, 1, 2], 3)), 1.0);
    let half = ConfusionMatrix::from_counts(2, vec![1, 1, 1, 1]).unwrap();
    assert!((macro_f1(&half) - 0.5).abs() < 1e-15);
}

#[test]
fn macro_f1_matches_reference_with_absent_classes() {
    let mut r = rng(21);
    for case in 0..100 {
        let k = r.random_range(2..7);
        let n = r.random_range(1..40);
        // restrict labels so some classes are absent in about half the cases
        let used = if case % 2 == 0 { k } else { (k - 1).max(1) };
        let truth = random_labels(&mut r, n, used);
        let pred = random_labels(&mut r, n, used);
        let got = macro_f1(&cm_from(&truth, &pred, k));
        let want = oracles::macro_f1(&truth, &pred, k);
        assert!((got - want).abs() <= 1e-12, "{got} vs {want}");
    }
}

#[test]
fn mean_entropy_examples_and_oracle() {
    let onehot = Matrix::from_rows(&[[0.0f64, 1.0, 0.0]]).unwrap();
    assert_eq!(mean_entropy(&onehot).unwrap(), 0.0);
    let uniform = Matrix::new(3, 6, vec![1.0 / 6.0; 18]).unwrap();
    assert!((mean_entropy(&uniform).unwrap() - 1.79176).abs() < 1e-5);
    let mut r = rng(22);
    for _ in 0..100 {
        let (n, k) = (r.random_range(1..10), r.random_range(2..8));
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| oracles::softmax(&(0..k).map(|_| r.random_range(-3.0..3.0)).collect::<Vec<_>>()))
            .collect();
        let m = Matrix::from_rows(&rows).unwrap();
        let want = rows.iter().map(|p| oracles::entropy(p)).sum::<f64>() / n as f64;
        assert!((mean_entropy(&m).unwrap() - want).abs() <= 1e-7);
    }
}

#[test]
fn cka_self_rotation_and_gram_oracle() {
    let mut r = rng(23);
    for _ in 0..100 {
        let n = r.random_range(3..12);
        let (d1, d2) = (r.random_range(1..6), r.random_range(1..6));
        let x = random_matrix(&mut r, n, d1);
        let y = random_matrix(&mut r, n, d2);
        assert!((linear_cka(&x, &x).unwrap() - 1.0).abs() <= 1e-9);
        assert!((linear_cka(&x, &y).unwrap() - oracles::cka(&x, &y)).abs() <= 1e-6);
    }
    // rotation by a 2-D orthogonal matrix
    let x = random_matrix(&mut r, 8, 2);
    let (c, s) = (0.6f64, 0.8f64);
    let rows: Vec<Vec<f64>> = x.iter_rows().map(|v| vec![c * v[0] - s * v[1], s * v[0] + c * v[1]]).collect();
    let xr = Matrix::from_rows(&rows).unwrap();
    assert!((linear_cka(&x, &xr).unwrap() - 1.0).abs() <= 1e-9);
}

#[test]
fn layer_similarity_is_symmetric_with_unit_diagonal() {
    let mut r = rng(24);
    let m = oftta::nn::NetworkModel::<f32>::init(common::tiny_arch(), 2).unwrap();
    let x = common::random_tensor(&mut r, m.arch.input_shape(10));
    let s = layer_similarity(&m, &x, &NormStrategy::Tbn).unwrap();
    assert_eq!(s.rows(), 2);
    assert_eq!(s.get(0, 0), 1.0);
    assert_eq!(s.get(0, 1), s.get(1, 0));
    assert!((0.0..=1.0 + 1e-9).contains(&s.get(0, 1)));
}

proptest! {
    #[test]
    fn scores_bounded(k in 2usize..6, pairs in proptest::collection::vec((0usize..6, 0usize..6), 1..50)) {
        let truth: Vec<usize> = pairs.iter().map(|p| p.0 % k).collect();
        let pred: Vec<usize> = pairs.iter().map(|p| p.1 % k).collect();
        let cm = cm_from(&truth, &pred, k);
        prop_assert!(macro_f1(&cm) <= 1.0);
        prop_assert!(accuracy(&cm).unwrap() <= 1.0);
    }

    #[test]
    fn balanced_diagonal_f1_equals_accuracy(k in 2usize..6, per in 1u64..20) {
        let mut counts = vec![0u64; k * k];
        for c in 0..k {
            counts[c * k + c] = per;
        }
        let cm = ConfusionMatrix::from_counts(k, counts).unwrap();
        prop_assert_eq!(macro_f1(&cm), accuracy(&cm).unwrap());
    }

    #[test]
    fn cka_in_unit_interval(seed in 0u64..10_000, n in 2usize..10, d1 in 1usize..5, d2 in 1usize..5) {
        let mut r = rng(seed);
        let x = random_matrix(&mut r, n, d1);
        let y = random_matrix(&mut r, n, d2);
        let v = linear_cka(&x, &y).unwrap();
        prop_assert!((-1e-9..=1.0 + 1e-9).contains(&v));
    }
}
