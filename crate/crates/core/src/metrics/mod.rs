//! Scoring of online predictions, prediction entropy, and the linear-CKA
//! layer-similarity diagnostic.

pub mod bench;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::NetworkModel;
use crate::normalization::NormStrategy;
use crate::tensor::{Matrix, Real, Tensor4};

pub use bench::{benchmark, BenchReport, MethodTiming};

/// Softmax in f64 with max-subtraction.
pub fn softmax<T: Real>(logits: &[T]) -> Vec<f64> {
    let max = logits
        .iter()
        .map(|v| v.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Shannon entropy in nats, `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Entropy of `softmax(logits)` at temperature 1.
pub fn softmax_entropy<T: Real>(logits: &[T]) -> f64 {
    entropy(&softmax(logits))
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate().skip(1) {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            k: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::shape(format!(
                "{} counts for a {num_classes}x{num_classes} matrix",
                counts.len()
            )));
        }
        Ok(Self {
            k: num_classes,
            counts,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.k + predicted] += 1;
    }

    pub fn record_all(&mut self, truth: &[usize], predicted: &[usize]) {
        for (&t, &p) in truth.iter().zip(predicted) {
            self.record(t, p);
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        (0..self.k).map(|p| self.get(truth, p)).sum()
    }

    pub fn col_sum(&self, predicted: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, predicted)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("accuracy of an empty confusion matrix".into()));
    }
    Ok(cm.trace() as f64 / total as f64)
}

/// Unweighted mean of per-class F1 over all `K` classes. A class with
/// `P + R = 0` (including one never seen nor predicted) scores 0.
pub fn macro_f1(cm: &ConfusionMatrix) -> f64 {
    let k = cm.num_classes();
    if k == 0 {
        return 0.0;
    }
    let sum: f64 = (0..k)
        .map(|c| {
            let tp = cm.get(c, c) as f64;
            let predicted = cm.col_sum(c) as f64;
            let actual = cm.row_sum(c) as f64;
            let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
            let r = if actual > 0.0 { tp / actual } else { 0.0 };
            if p + r > 0.0 {
                2.0 * p * r / (p + r)
            } else {
                0.0
            }
        })
        .sum();
    sum / k as f64
}

/// Mean Shannon entropy (nats) of probability rows.
pub fn mean_entropy<T: Real>(probabilities: &Matrix<T>) -> Result<f64> {
    if probabilities.rows() == 0 {
        return Err(Error::Data("mean entropy of zero rows".into()));
    }
    let mut total = 0.0;
    for (i, row) in probabilities.iter_rows().enumerate() {
        let p: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > 1e-5 || p.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Data(format!(
                "row {i} is not a probability vector (sum {sum})"
            )));
        }
        total += entropy(&p);
    }
    Ok(total / probabilities.rows() as f64)
}

fn centered<T: Real>(x: &Matrix<T>) -> Vec<Vec<f64>> {
    let (n, d) = (x.rows(), x.cols());
    let mut cols = vec![vec![0.0f64; n]; d];
    for r in 0..n {
        for (c, v) in x.row(r).iter().enumerate() {
            cols[c][r] = v.as_f64();
        }
    }
    for col in &mut cols {
        let mean = col.iter().sum::<f64>() / n as f64;
        col.iter_mut().for_each(|v| *v -= mean);
    }
    cols
}

/// Squared Frobenius norm of `A^T B` for column-major centered `A`, `B`.
fn cross_frobenius_sq(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for ca in a {
        for cb in b {
            let dot: f64 = ca.iter().zip(cb).map(|(x, y)| x * y).sum();
            s += dot * dot;
        }
    }
    s
}

/// Linear centered kernel alignment between two representations of the
/// same `N` samples.
pub fn linear_cka<T: Real, U: Real>(x: &Matrix<T>, y: &Matrix<U>) -> Result<f64> {
    if x.rows() != y.rows() {
        return Err(Error::shape(format!(
            "CKA over {} and {} samples",
            x.rows(),
            y.rows()
        )));
    }
    if x.rows() < 2 {
        return Err(Error::Data("CKA needs at least two samples".into()));
    }
    let xc = centered(x);
    let yc = centered(y);
    let xx = cross_frobenius_sq(&xc, &xc).sqrt();
    let yy = cross_frobenius_sq(&yc, &yc).sqrt();
    if xx == 0.0 || yy == 0.0 {
        log::warn!("CKA of a zero-variance representation; reporting 0");
        return Ok(0.0);
    }
    Ok(cross_frobenius_sq(&yc, &xc) / (xx * yy))
}

/// Pairwise linear CKA between the pooled outputs of every block (each
/// sample flattened), as a `blocks x blocks` matrix.
pub fn layer_similarity(
    model: &NetworkModel<f32>,
    batch: &Tensor4<f32>,
    strategy: &NormStrategy,
) -> Result<Matrix<f64>> {
    let (_, trace) = model.forward_trace(batch, strategy)?;
    let flat: Vec<Matrix<f32>> = trace
        .iter()
        .map(|t| {
            let s = t.shape();
            Matrix::new(s.batch, s.channels * s.plane(), t.data().to_vec())
        })
        .collect::<Result<_>>()?;
    let n = flat.len();
    let mut out = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = if i == j { 1.0 } else { linear_cka(&flat[i], &flat[j])? };
            out.row_mut(i)[j] = v;
            out.row_mut(j)[i] = v;
        }
    }
    Ok(out)
}
