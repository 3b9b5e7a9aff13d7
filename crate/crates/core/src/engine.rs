//! One-pass streaming test-time adaptation and the evaluation protocols
//! built on it.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{standardize, AxisStats, DomainDataset};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, argmax, macro_f1, softmax_entropy, ConfusionMatrix};
use crate::nn::NetworkModel;
use crate::normalization::{AlphaSchedule, NormStrategy};
use crate::prototype::{adapt_batch_scored, cosine_logits, init_support, Capacity, PrototypeSet, PseudoLabelSource, SupportSet};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TtaMethod {
    /// Running statistics, linear head.
    Erm,
    /// Test-batch statistics, linear head.
    Bn,
    /// Running statistics, prototype classifier.
    T3a,
    /// Constant prior ratio at every layer, linear head.
    AlphaBn { alpha: f64 },
    /// Layer-wise exponential schedule, prototype classifier.
    Oftta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierMode {
    Linear,
    Prototype,
}

impl TtaMethod {
    pub const STANDARD: [TtaMethod; 4] = [TtaMethod::Erm, TtaMethod::Bn, TtaMethod::T3a, TtaMethod::Oftta];

    pub fn classifier(&self) -> ClassifierMode {
        match self {
            TtaMethod::T3a | TtaMethod::Oftta => ClassifierMode::Prototype,
            _ => ClassifierMode::Linear,
        }
    }

    pub fn norm_strategy(&self, config: &AdaptationConfig) -> NormStrategy {
        match *self {
            TtaMethod::Erm | TtaMethod::T3a => NormStrategy::Cbn,
            TtaMethod::Bn => NormStrategy::Tbn,
            TtaMethod::AlphaBn { alpha } => NormStrategy::AlphaConst { alpha },
            TtaMethod::Oftta => NormStrategy::Edtn {
                bottom: config.edtn_bottom,
                top: config.edtn_top,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let TtaMethod::AlphaBn { alpha } = *self {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(Error::config(format!("alpha-bn ratio must lie in [0, 1], got {alpha}")));
            }
        }
        Ok(())
    }
}

impl fmt::Display for TtaMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TtaMethod::Erm => f.write_str("erm"),
            TtaMethod::Bn => f.write_str("bn"),
            TtaMethod::T3a => f.write_str("t3a"),
            TtaMethod::AlphaBn { alpha } => write!(f, "alpha-bn:{alpha}"),
            TtaMethod::Oftta => f.write_str("oftta"),
        }
    }
}

impl TryFrom<String> for TtaMethod {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TtaMethod> for String {
    fn from(m: TtaMethod) -> String {
        m.to_string()
    }
}

impl FromStr for TtaMethod {
    type Err = Error;

    /// `erm`, `bn`, `t3a`, `oftta` or `alpha-bn:<ratio>` (case-insensitive).
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let method = match lower.as_str() {
            "erm" => TtaMethod::Erm,
            "bn" | "tbn" => TtaMethod::Bn,
            "t3a" => TtaMethod::T3a,
            "oftta" => TtaMethod::Oftta,
            other => {
                let ratio = other
                    .strip_prefix("alpha-bn:")
                    .or_else(|| other.strip_prefix("alpha_bn:"))
                    .ok_or_else(|| {
                        Error::config(format!(
                            "unknown method `{s}` (expected erm, bn, t3a, oftta or alpha-bn:<ratio>)"
                        ))
                    })?;
                let alpha = ratio
                    .parse::<f64>()
                    .map_err(|_| Error::config(format!("invalid alpha-bn ratio `{ratio}`")))?;
                TtaMethod::AlphaBn { alpha }
            }
        };
        method.validate()?;
        Ok(method)
    }
}

fn default_capacity() -> Capacity {
    Capacity::PerClass(25)
}
fn default_bottom() -> f64 {
    0.1
}
fn default_top() -> f64 {
    1.0
}
fn default_floor() -> f64 {
    0.6
}
fn default_batch() -> usize {
    180
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptationConfig {
    pub method: TtaMethod,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Per-class support capacity; `-1` in serialized form is unbounded.
    #[serde(default = "default_capacity")]
    pub capacity: Capacity,
    #[serde(default = "default_bottom")]
    pub edtn_bottom: f64,
    #[serde(default = "default_top")]
    pub edtn_top: f64,
    /// Shuffles the sample order inside each domain stream.
    #[serde(default)]
    pub seed: u64,
    /// Lower bound on every EDTN prior ratio when `batch_size == 1`.
    #[serde(default = "default_floor")]
    pub bs1_alpha_floor: f64,
    /// Reset the support set at each domain boundary in continual runs.
    #[serde(default)]
    pub ctta_reset: bool,
    #[serde(default)]
    pub pseudo_labels: PseudoLabelSource,
}

impl AdaptationConfig {
    pub fn new(method: TtaMethod) -> Self {
        Self {
            method,
            batch_size: default_batch(),
            capacity: default_capacity(),
            edtn_bottom: default_bottom(),
            edtn_top: default_top(),
            seed: 0,
            bs1_alpha_floor: default_floor(),
            ctta_reset: false,
            pseudo_labels: PseudoLabelSource::default(),
        }
    }

    pub fn with_method(&self, method: TtaMethod) -> Self {
        Self {
            method,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.bs1_alpha_floor) {
            return Err(Error::config(format!(
                "bs1_alpha_floor must lie in [0, 1], got {}",
                self.bs1_alpha_floor
            )));
        }
        NormStrategy::Edtn {
            bottom: self.edtn_bottom,
            top: self.edtn_top,
        }
        .validate()
    }

    /// Prior ratios actually applied, including the batch-size-1 floor.
    pub fn schedule(&self, num_layers: usize) -> Result<AlphaSchedule> {
        let strategy = self.method.norm_strategy(self);
        let mut schedule = strategy.schedule(num_layers)?;
        if self.batch_size == 1 && matches!(strategy, NormStrategy::Edtn { .. }) {
            for a in &mut schedule.0 {
                *a = a.max(self.bs1_alpha_floor);
            }
        }
        Ok(schedule)
    }
}

/// Per-batch outcome as recorded in the stream log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub index: usize,
    pub domain: String,
    pub predictions: Vec<usize>,
    pub labels: Vec<usize>,
    /// Entropy of the softmax over the method's output logits.
    pub entropies: Vec<f32>,
    /// Wall time of forward plus adaptation.
    pub ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub samples: usize,
    pub batches: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mean_entropy: f64,
    pub mean_batch_ms: f64,
    pub std_batch_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamResult {
    pub subject: String,
    pub records: Vec<BatchRecord>,
    pub confusion: ConfusionMatrix,
    pub summary: StreamSummary,
    /// Per-class support sizes at the end of the stream, prototype methods only.
    pub support_sizes: Option<Vec<usize>>,
}

impl StreamResult {
    fn from_records(subject: &str, k: usize, records: Vec<BatchRecord>, support_sizes: Option<Vec<usize>>) -> Result<Self> {
        let mut confusion = ConfusionMatrix::new(k);
        let mut entropy_sum = 0.0f64;
        for r in &records {
            confusion.record_all(&r.labels, &r.predictions);
            entropy_sum += r.entropies.iter().map(|&e| e as f64).sum::<f64>();
        }
        let samples = confusion.total() as usize;
        let (mean_ms, std_ms) = mean_std(&records.iter().map(|r| r.ms).collect::<Vec<_>>());
        let summary = StreamSummary {
            samples,
            batches: records.len(),
            accuracy: accuracy(&confusion)?,
            macro_f1: macro_f1(&confusion),
            mean_entropy: entropy_sum / samples as f64,
            mean_batch_ms: mean_ms,
            std_batch_ms: std_ms,
        };
        Ok(Self {
            subject: subject.to_string(),
            records,
            confusion,
            summary,
            support_sizes,
        })
    }

    /// Every prediction in stream order.
    pub fn predictions(&self) -> Vec<usize> {
        self.records.iter().flat_map(|r| r.predictions.iter().copied()).collect()
    }
}

/// Population mean and standard deviation; `(0, 0)` for an empty slice.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Predictions for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub predictions: Vec<usize>,
    pub entropies: Vec<f32>,
}

/// Adaptation state for one stream: a frozen model, its resolved prior
/// ratios, and (for prototype methods) the support set.
#[derive(Debug, Clone)]
pub struct Adapter<'m> {
    model: &'m NetworkModel<f32>,
    config: AdaptationConfig,
    schedule: AlphaSchedule,
    support: Option<SupportSet>,
    prototypes: Option<PrototypeSet>,
}

impl<'m> Adapter<'m> {
    pub fn new(model: &'m NetworkModel<f32>, config: &AdaptationConfig) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule(model.num_bn_layers())?;
        let mut adapter = Self {
            model,
            config: config.clone(),
            schedule,
            support: None,
            prototypes: None,
        };
        adapter.reset()?;
        Ok(adapter)
    }

    /// Back to the freshly seeded support set.
    pub fn reset(&mut self) -> Result<()> {
        if self.config.method.classifier() == ClassifierMode::Prototype {
            let support = init_support(&self.model.head)?;
            self.prototypes = Some(support.centroids()?);
            self.support = Some(support);
        }
        Ok(())
    }

    pub fn schedule(&self) -> &AlphaSchedule {
        &self.schedule
    }

    pub fn support(&self) -> Option<&SupportSet> {
        self.support.as_ref()
    }

    /// Forward plus adaptation on an already standardized batch.
    pub fn step(&mut self, batch: &Tensor4<f32>) -> Result<StepOutput> {
        let out = self.model.forward_with_schedule(batch, &self.schedule)?;
        match (&mut self.support, &self.prototypes) {
            (Some(support), Some(before)) => {
                let scores = match self.config.pseudo_labels {
                    PseudoLabelSource::LinearHead => out.logits,
                    PseudoLabelSource::Prototypes => cosine_logits(&out.features, before)?,
                };
                let adj = adapt_batch_scored(support, &out.features, &scores, self.config.capacity)?;
                self.prototypes = Some(adj.prototypes);
                Ok(StepOutput {
                    predictions: adj.labels,
                    entropies: adj.output_entropies,
                })
            }
            _ => {
                let (predictions, entropies) = out
                    .logits
                    .iter_rows()
                    .map(|row| (argmax(row), softmax_entropy(row) as f32))
                    .unzip();
                Ok(StepOutput { predictions, entropies })
            }
        }
    }

    /// Prediction for one raw window of shape `(1, 1, H, W)`, standardized
    /// with the model's source statistics first.
    pub fn adapt_single_instance(&mut self, window: &Tensor4<f32>) -> Result<usize> {
        if self.config.batch_size != 1 {
            return Err(Error::config("single-instance adaptation requires batch_size 1"));
        }
        if window.shape().batch != 1 {
            return Err(Error::shape(format!("expected one window, got {}", window.shape())));
        }
        let mut x = window.clone();
        if let Some(stats) = &self.model.input_norm {
            standardize_tensor(&mut x, stats)?;
        }
        Ok(self.step(&x)?.predictions[0])
    }

    /// Stream one domain: standardize, shuffle by the configured seed, and
    /// visit consecutive batches once (the trailing batch may be short).
    pub fn run_domain(&mut self, domain: &DomainDataset) -> Result<StreamResult> {
        if domain.is_empty() {
            return Err(Error::Data(format!("domain `{}` is empty", domain.subject())));
        }
        let k = self.model.num_classes();
        if domain.num_classes() != k {
            return Err(Error::Data(format!(
                "domain `{}` has {} classes, model has {k}",
                domain.subject(),
                domain.num_classes()
            )));
        }
        let prepared = match &self.model.input_norm {
            Some(stats) => standardize(domain, stats)?,
            None => domain.clone(),
        };
        let order = stream_order(domain.len(), self.config.seed);
        let mut records = Vec::with_capacity(order.len().div_ceil(self.config.batch_size));
        for (index, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let batch = prepared.batch(chunk);
            let start = Instant::now();
            let out = self.step(&batch)?;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            records.push(BatchRecord {
                index,
                domain: domain.subject().to_string(),
                predictions: out.predictions,
                labels: chunk.iter().map(|&i| domain.labels()[i]).collect(),
                entropies: out.entropies,
                ms,
            });
        }
        StreamResult::from_records(domain.subject(), k, records, self.support.as_ref().map(SupportSet::sizes))
    }
}

/// Seeded permutation of `0..n`.
pub fn stream_order(n: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

/// Apply source axis statistics to a raw batch in place.
pub fn standardize_tensor(x: &mut Tensor4<f32>, stats: &AxisStats) -> Result<()> {
    let s = x.shape();
    if stats.mean.len() != s.width {
        return Err(Error::shape("standardization width mismatch"));
    }
    for row in x.data_mut().chunks_exact_mut(s.width) {
        for (c, v) in row.iter_mut().enumerate() {
            if stats.std[c] > 0.0 {
                *v = ((*v as f64 - stats.mean[c]) / stats.std[c]) as f32;
            }
        }
    }
    Ok(())
}

/// A single adaptation stream over one domain with fresh state.
pub fn run_stream(model: &NetworkModel<f32>, domain: &DomainDataset, config: &AdaptationConfig) -> Result<StreamResult> {
    Adapter::new(model, config)?.run_domain(domain)
}

/// One seed's worth of per-domain results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub domains: Vec<StreamResult>,
}

impl SeedRun {
    fn average(&self, f: impl Fn(&StreamSummary) -> f64) -> f64 {
        self.domains.iter().map(|d| f(&d.summary)).sum::<f64>() / self.domains.len() as f64
    }
}

/// Results of a protocol across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolResult {
    pub method: TtaMethod,
    pub subjects: Vec<String>,
    pub runs: Vec<SeedRun>,
}

impl ProtocolResult {
    /// Mean and std over seeds of one domain's metric.
    pub fn domain_stat(&self, domain: usize, f: impl Fn(&StreamSummary) -> f64) -> (f64, f64) {
        mean_std(&self.runs.iter().map(|r| f(&r.domains[domain].summary)).collect::<Vec<_>>())
    }

    /// Mean and std over seeds of the per-seed domain average.
    pub fn average_stat(&self, f: impl Fn(&StreamSummary) -> f64) -> (f64, f64) {
        mean_std(&self.runs.iter().map(|r| r.average(&f)).collect::<Vec<_>>())
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.average_stat(|s| s.accuracy).0
    }

    pub fn mean_entropy(&self) -> f64 {
        self.average_stat(|s| s.mean_entropy).0
    }
}

fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        Err(Error::config("at least one seed is required"))
    } else {
        Ok(())
    }
}

/// Leave-one-out adaptation: `models[i]` was trained without `domains[i]`
/// and adapts on it with fresh state, once per seed.
pub fn run_looa(
    models: &[NetworkModel<f32>],
    domains: &[DomainDataset],
    config: &AdaptationConfig,
    seeds: &[u64],
) -> Result<ProtocolResult> {
    check_seeds(seeds)?;
    if domains.is_empty() {
        return Err(Error::config("no domains to adapt on"));
    }
    if models.len() != domains.len() {
        return Err(Error::config(format!(
            "{} models for {} held-out domains",
            models.len(),
            domains.len()
        )));
    }
    let runs = seeds
        .iter()
        .map(|&seed| {
            let cfg = AdaptationConfig { seed, ..config.clone() };
            let results = models
                .iter()
                .zip(domains)
                .map(|(m, d)| run_stream(m, d, &cfg))
                .collect::<Result<Vec<_>>>()?;
            Ok(SeedRun { seed, domains: results })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProtocolResult {
        method: config.method,
        subjects: domains.iter().map(|d| d.subject().to_string()).collect(),
        runs,
    })
}

/// Continual adaptation across `targets` in the given order, carrying the
/// adaptation state over domain boundaries unless `ctta_reset` is set.
pub fn run_ctta(
    model: &NetworkModel<f32>,
    source_subject: &str,
    targets: &[DomainDataset],
    config: &AdaptationConfig,
    seeds: &[u64],
) -> Result<ProtocolResult> {
    check_seeds(seeds)?;
    if targets.is_empty() {
        return Err(Error::config("no target domains"));
    }
    if let Some(d) = targets.iter().find(|d| d.subject() == source_subject) {
        return Err(Error::config(format!(
            "target sequence contains the source domain `{}`",
            d.subject()
        )));
    }
    let runs = seeds
        .iter()
        .map(|&seed| {
            let cfg = AdaptationConfig { seed, ..config.clone() };
            let mut adapter = Adapter::new(model, &cfg)?;
            let mut results = Vec::with_capacity(targets.len());
            for (i, d) in targets.iter().enumerate() {
                if i > 0 && cfg.ctta_reset {
                    adapter.reset()?;
                }
                results.push(adapter.run_domain(d)?);
            }
            Ok(SeedRun { seed, domains: results })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ProtocolResult {
        method: config.method,
        subjects: targets.iter().map(|d| d.subject().to_string()).collect(),
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_parsing_round_trips() {
        for m in [
            TtaMethod::Erm,
            TtaMethod::Bn,
            TtaMethod::T3a,
            TtaMethod::Oftta,
            TtaMethod::AlphaBn { alpha: 0.25 },
        ] {
            assert_eq!(m.to_string().parse::<TtaMethod>().unwrap(), m);
        }
        assert!("sgd".parse::<TtaMethod>().is_err());
        assert!("alpha-bn:1.5".parse::<TtaMethod>().is_err());
    }

    #[test]
    fn method_components() {
        let c = AdaptationConfig::new(TtaMethod::Oftta);
        assert_eq!(TtaMethod::Erm.norm_strategy(&c), NormStrategy::Cbn);
        assert_eq!(TtaMethod::T3a.norm_strategy(&c), NormStrategy::Cbn);
        assert_eq!(TtaMethod::Bn.norm_strategy(&c), NormStrategy::Tbn);
        assert_eq!(TtaMethod::Oftta.norm_strategy(&c), NormStrategy::Edtn { bottom: 0.1, top: 1.0 });
        assert_eq!(TtaMethod::T3a.classifier(), ClassifierMode::Prototype);
        assert_eq!(TtaMethod::Bn.classifier(), ClassifierMode::Linear);
    }

    #[test]
    fn single_batch_floor() {
        let mut c = AdaptationConfig::new(TtaMethod::Oftta);
        c.batch_size = 1;
        let s = c.schedule(3).unwrap();
        assert_eq!(s.alphas()[0], 0.6);
        assert_eq!(s.alphas()[2], 1.0);
        let tbn = c.with_method(TtaMethod::Bn).schedule(3).unwrap();
        assert_eq!(tbn.alphas(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        let mut c = AdaptationConfig::new(TtaMethod::Erm);
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = AdaptationConfig::new(TtaMethod::Erm);
        c.edtn_bottom = 2.0;
        assert!(c.validate().is_err());
        let json = r#"{"method":"oftta","capacity":-1}"#;
        let c: AdaptationConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.capacity, Capacity::Unbounded);
        assert_eq!(c.batch_size, 180);
        assert!(serde_json::from_str::<AdaptationConfig>(r#"{"method":"erm","capacity":0}"#).is_err());
    }

    #[test]
    fn population_std() {
        assert_eq!(mean_std(&[1.0, 3.0]), (2.0, 1.0));
        assert_eq!(mean_std(&[]), (0.0, 0.0));
    }

    #[test]
    fn permutation_is_seeded() {
        let a = stream_order(50, 1);
        assert_eq!(a, stream_order(50, 1));
        assert_ne!(a, stream_order(50, 2));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }
}
