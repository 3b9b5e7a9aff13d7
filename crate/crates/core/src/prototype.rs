//! Optimization-free classifier adjustment.
//!
//! Each class keeps a support set of unit-norm features seeded with its
//! normalized head weight vector. Test features are pseudo-labeled (by the
//! frozen linear head, or by the pre-batch prototypes), appended to their
//! pseudo-class with the entropy of that pseudo-label, the lowest-entropy
//! `M` entries per class are kept, and the batch is finally classified by
//! cosine similarity to the refreshed centroids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{argmax, softmax_entropy};
use crate::nn::LinearHead;
use crate::tensor::Matrix;

/// Per-class support capacity `M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub enum Capacity {
    Unbounded,
    PerClass(usize),
}

impl TryFrom<i64> for Capacity {
    type Error = Error;

    /// `-1` is unbounded; otherwise at least 1.
    fn try_from(m: i64) -> Result<Self> {
        match m {
            -1 => Ok(Capacity::Unbounded),
            m if m >= 1 => Ok(Capacity::PerClass(m as usize)),
            m => Err(Error::config(format!(
                "support capacity must be -1 (unbounded) or >= 1, got {m}"
            ))),
        }
    }
}

impl From<Capacity> for i64 {
    fn from(c: Capacity) -> i64 {
        match c {
            Capacity::Unbounded => -1,
            Capacity::PerClass(m) => m as i64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportEntry {
    /// Unit L2 norm.
    pub feature: Vec<f32>,
    /// Prediction entropy (nats) when the entry was inserted.
    pub entropy: f32,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportSet {
    classes: Vec<Vec<SupportEntry>>,
    dim: usize,
    next_seq: u64,
    skipped: u64,
}

/// Class centroids, `K x m`, not re-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub centroids: Matrix<f32>,
}

impl PrototypeSet {
    pub fn num_classes(&self) -> usize {
        self.centroids.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classification {
    /// Cosine similarity to each prototype.
    pub logits: Matrix<f32>,
    pub labels: Vec<usize>,
    /// Entropy of `softmax(logits)`.
    pub entropies: Vec<f32>,
}

fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

fn unit(v: &[f32]) -> Option<Vec<f32>> {
    if v.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let n = l2_norm(v);
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    Some(v.iter().map(|&x| (x as f64 / n) as f32).collect())
}

/// Seed each class with its normalized head weight vector (entropy 0).
pub fn init_support(head: &LinearHead<f32>) -> Result<SupportSet> {
    let k = head.num_classes();
    let mut classes = Vec::with_capacity(k);
    for c in 0..k {
        let w = head.weight.row(c);
        let feature = unit(w).ok_or_else(|| {
            Error::Numeric(format!("class {c} weight vector is zero or non-finite"))
        })?;
        classes.push(vec![SupportEntry {
            feature,
            entropy: 0.0,
            seq: c as u64,
        }]);
    }
    Ok(SupportSet {
        classes,
        dim: head.feature_dim(),
        next_seq: k as u64,
        skipped: 0,
    })
}

/// Cosine similarity of one feature row to every centroid, or `None` when
/// the row has zero norm or is non-finite.
fn cosine_row(h: &[f32], protos: &PrototypeSet, norms: &[f64]) -> Option<Vec<f32>> {
    if h.iter().any(|x| !x.is_finite()) {
        return None;
    }
    let hn = l2_norm(h);
    if hn == 0.0 {
        return None;
    }
    Some(
        protos
            .centroids
            .iter_rows()
            .zip(norms)
            .map(|(mu, &mn)| {
                let dot: f64 = h.iter().zip(mu).map(|(&a, &b)| a as f64 * b as f64).sum();
                (dot / (hn * mn)) as f32
            })
            .collect(),
    )
}

fn centroid_norms(protos: &PrototypeSet) -> Result<Vec<f64>> {
    protos
        .centroids
        .iter_rows()
        .enumerate()
        .map(|(k, mu)| {
            let n = l2_norm(mu);
            if n > 0.0 && n.is_finite() {
                Ok(n)
            } else {
                Err(Error::Numeric(format!("prototype {k} is degenerate")))
            }
        })
        .collect()
}

fn check_dims(features: &Matrix<f32>, protos: &PrototypeSet) -> Result<()> {
    if features.cols() != protos.centroids.cols() {
        return Err(Error::shape(format!(
            "features of dim {} against prototypes of dim {}",
            features.cols(),
            protos.centroids.cols()
        )));
    }
    Ok(())
}

/// Nearest-prototype classification under cosine similarity.
pub fn classify(features: &Matrix<f32>, protos: &PrototypeSet) -> Result<Classification> {
    check_dims(features, protos)?;
    let norms = centroid_norms(protos)?;
    let k = protos.num_classes();
    let mut logits = Matrix::zeros(features.rows(), k);
    let mut labels = Vec::with_capacity(features.rows());
    let mut entropies = Vec::with_capacity(features.rows());
    for (b, h) in features.iter_rows().enumerate() {
        let row = cosine_row(h, protos, &norms).ok_or_else(|| {
            Error::Data(format!("feature row {b} has zero norm or non-finite values"))
        })?;
        labels.push(argmax(&row));
        entropies.push(softmax_entropy(&row) as f32);
        logits.row_mut(b).copy_from_slice(&row);
    }
    Ok(Classification {
        logits,
        labels,
        entropies,
    })
}

/// Pseudo-labels: the nearest prototype, ties to the smallest class.
pub fn pseudo_label(features: &Matrix<f32>, protos: &PrototypeSet) -> Result<Vec<usize>> {
    classify(features, protos).map(|c| c.labels)
}

impl SupportSet {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.dim
    }

    pub fn class(&self, k: usize) -> &[SupportEntry] {
        &self.classes[k]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.classes.iter().map(Vec::len).collect()
    }

    pub fn total_entries(&self) -> usize {
        self.classes.iter().map(Vec::len).sum()
    }

    /// Rows rejected so far because they were zero or non-finite.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }

    /// Analytic footprint: stored feature floats plus per-entry entropy
    /// (4 bytes) and sequence number (8 bytes). A lower bound on real use.
    pub fn memory_bytes(&self) -> usize {
        self.total_entries() * (self.dim * 4 + 4 + 8)
    }

    /// Append each normalized feature to its labeled class. Rows that are
    /// zero or non-finite are skipped and counted; returns the number
    /// inserted.
    pub fn insert(&mut self, features: &Matrix<f32>, labels: &[usize], entropies: &[f32]) -> Result<usize> {
        if features.cols() != self.dim {
            return Err(Error::shape(format!(
                "inserting features of dim {} into support of dim {}",
                features.cols(),
                self.dim
            )));
        }
        if labels.len() != features.rows() || entropies.len() != features.rows() {
            return Err(Error::shape("features, labels and entropies disagree in length"));
        }
        let k = self.num_classes();
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!("pseudo-label {bad} outside 0..{k}")));
        }
        let mut inserted = 0;
        for ((h, &label), &entropy) in features.iter_rows().zip(labels).zip(entropies) {
            match unit(h) {
                Some(feature) if entropy.is_finite() => {
                    self.classes[label].push(SupportEntry {
                        feature,
                        entropy,
                        seq: self.next_seq,
                    });
                    self.next_seq += 1;
                    inserted += 1;
                }
                _ => {
                    self.skipped += 1;
                    log::warn!("skipping degenerate feature (total skipped: {})", self.skipped);
                }
            }
        }
        Ok(inserted)
    }

    /// Keep the `M` lowest-entropy entries per class (older first on ties),
    /// retained in insertion order.
    pub fn filter_by_entropy(&mut self, capacity: Capacity) {
        let Capacity::PerClass(m) = capacity else {
            return;
        };
        for entries in &mut self.classes {
            if entries.len() <= m {
                continue;
            }
            entries.sort_by(|a, b| a.entropy.total_cmp(&b.entropy).then(a.seq.cmp(&b.seq)));
            entries.truncate(m);
            entries.sort_by_key(|e| e.seq);
        }
    }

    /// Arithmetic mean of each class's entries.
    pub fn centroids(&self) -> Result<PrototypeSet> {
        let mut c = Matrix::zeros(self.num_classes(), self.dim);
        for (k, entries) in self.classes.iter().enumerate() {
            if entries.is_empty() {
                return Err(Error::Numeric(format!("support set of class {k} is empty")));
            }
            let mut acc = vec![0.0f64; self.dim];
            for e in entries {
                for (a, &v) in acc.iter_mut().zip(&e.feature) {
                    *a += v as f64;
                }
            }
            let n = entries.len() as f64;
            for (dst, a) in c.row_mut(k).iter_mut().zip(acc) {
                *dst = (a / n) as f32;
            }
        }
        Ok(PrototypeSet { centroids: c })
    }
}

/// Outcome of one adjustment step.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchAdjustment {
    /// Final predictions against the refreshed prototypes.
    pub labels: Vec<usize>,
    pub pseudo_labels: Vec<usize>,
    /// Entropy of the final cosine logits.
    pub entropies: Vec<f32>,
    /// Entropy of the output logits `h . mu_k / |mu_k|`: the cosine scaled
    /// by the feature norm, i.e. a linear layer with unit-norm class
    /// weights.
    pub output_entropies: Vec<f32>,
    pub prototypes: PrototypeSet,
}

/// Classify rows, tolerating degenerate ones: those get all-zero logits
/// (label 0, maximal entropy).
fn classify_lenient(features: &Matrix<f32>, protos: &PrototypeSet) -> Result<(Classification, Vec<f32>)> {
    check_dims(features, protos)?;
    let norms = centroid_norms(protos)?;
    let k = protos.num_classes();
    let mut logits = Matrix::zeros(features.rows(), k);
    let mut labels = Vec::with_capacity(features.rows());
    let mut entropies = Vec::with_capacity(features.rows());
    let mut output = Vec::with_capacity(features.rows());
    for (b, h) in features.iter_rows().enumerate() {
        let row = cosine_row(h, protos, &norms).unwrap_or_else(|| vec![0.0; k]);
        let norm = l2_norm(h);
        let norm = if norm.is_finite() { norm } else { 0.0 };
        let scaled: Vec<f64> = row.iter().map(|&c| c as f64 * norm).collect();
        labels.push(argmax(&row));
        entropies.push(softmax_entropy(&row) as f32);
        output.push(softmax_entropy(&scaled) as f32);
        logits.row_mut(b).copy_from_slice(&row);
    }
    Ok((
        Classification {
            logits,
            labels,
            entropies,
        },
        output,
    ))
}

/// Where pseudo-labels and their entropies come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PseudoLabelSource {
    /// The frozen linear head `W h + b`.
    #[default]
    LinearHead,
    /// Cosine similarity to the pre-batch prototypes.
    Prototypes,
}

/// One batch-synchronous adjustment step with pseudo-labels from the
/// pre-batch prototypes of the current support set.
pub fn adapt_batch(set: &mut SupportSet, features: &Matrix<f32>, capacity: Capacity) -> Result<BatchAdjustment> {
    let scores = cosine_logits(features, &set.centroids()?)?;
    adapt_batch_scored(set, features, &scores, capacity)
}

/// Cosine logits against `protos`; zero or non-finite rows score zero
/// against every class.
pub fn cosine_logits(features: &Matrix<f32>, protos: &PrototypeSet) -> Result<Matrix<f32>> {
    Ok(classify_lenient(features, protos)?.0.logits)
}

/// One batch-synchronous adjustment step with pseudo-labels and entropies
/// taken from `scores` (`B x K`, argmax and softmax entropy per row):
/// insert the whole batch, filter, refresh the centroids, and classify
/// the batch against them.
pub fn adapt_batch_scored(
    set: &mut SupportSet,
    features: &Matrix<f32>,
    scores: &Matrix<f32>,
    capacity: Capacity,
) -> Result<BatchAdjustment> {
    if features.rows() == 0 {
        return Err(Error::Data("empty adaptation batch".into()));
    }
    if scores.rows() != features.rows() || scores.cols() != set.num_classes() {
        return Err(Error::shape(format!(
            "scores are {}x{} for {} features and {} classes",
            scores.rows(),
            scores.cols(),
            features.rows(),
            set.num_classes()
        )));
    }
    let (pseudo_labels, pseudo_entropies): (Vec<usize>, Vec<f32>) = scores
        .iter_rows()
        .map(|r| (argmax(r), softmax_entropy(r) as f32))
        .unzip();
    set.insert(features, &pseudo_labels, &pseudo_entropies)?;
    set.filter_by_entropy(capacity);
    let prototypes = set.centroids()?;
    let (fin, output_entropies) = classify_lenient(features, &prototypes)?;
    Ok(BatchAdjustment {
        labels: fin.labels,
        pseudo_labels,
        entropies: fin.entropies,
        output_entropies,
        prototypes,
    })
}
