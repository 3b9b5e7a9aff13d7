//! Per-batch latency and support-set memory of adaptation methods.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{standardize, DomainDataset};
use crate::engine::{mean_std, stream_order, Adapter, AdaptationConfig, TtaMethod};
use crate::error::{Error, Result};
use crate::nn::NetworkModel;
use crate::normalization::NormStrategy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodTiming {
    pub method: TtaMethod,
    /// Mean over repetitions of the mean per-batch time.
    pub mean_ms: f64,
    /// Population std over repetitions.
    pub std_ms: f64,
    pub runs: usize,
    /// Analytic support-set footprint at the end of a stream (lower bound:
    /// features, entropies and sequence numbers plus the centroids).
    pub support_bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub batch_size: usize,
    pub batches_timed: usize,
    pub repetitions: usize,
    /// Plain eval-mode forward with running statistics, per batch.
    pub forward_baseline_ms: f64,
    pub methods: Vec<MethodTiming>,
}

impl BenchReport {
    pub fn timing(&self, method: TtaMethod) -> Option<&MethodTiming> {
        self.methods.iter().find(|m| m.method == method)
    }

    /// Method with the smallest mean per-batch time.
    pub fn fastest(&self) -> Option<&MethodTiming> {
        self.methods.iter().min_by(|a, b| a.mean_ms.total_cmp(&b.mean_ms))
    }
}

/// Time each method's full per-batch step on `domain`. Within a
/// repetition every method gets its own fresh stream, and the methods are
/// interleaved batch by batch (together with a plain forward baseline) so
/// that machine-load drift affects them alike. The first batch of every
/// stream is a warm-up and is not timed.
pub fn benchmark(
    methods: &[TtaMethod],
    model: &NetworkModel<f32>,
    domain: &DomainDataset,
    config: &AdaptationConfig,
    repetitions: usize,
) -> Result<BenchReport> {
    if repetitions < 3 {
        return Err(Error::config(format!("benchmark needs at least 3 repetitions, got {repetitions}")));
    }
    if methods.is_empty() {
        return Err(Error::config("no methods to benchmark"));
    }
    config.validate()?;
    let prepared = match &model.input_norm {
        Some(stats) => standardize(domain, stats)?,
        None => domain.clone(),
    };
    let order = stream_order(prepared.len(), config.seed);
    let batches: Vec<_> = order.chunks(config.batch_size).map(|c| prepared.batch(c)).collect();
    if batches.len() < 2 {
        return Err(Error::Data("benchmark needs at least two batches (one is warm-up)".into()));
    }

    let mut per_method: Vec<Vec<f64>> = vec![Vec::with_capacity(repetitions); methods.len()];
    let mut support_bytes = vec![0usize; methods.len()];
    let mut baseline = Vec::with_capacity(repetitions);
    let cbn = NormStrategy::Cbn;
    let timed = (batches.len() - 1) as f64;
    let lanes = methods.len() + 1;
    for rep in 0..repetitions {
        let mut adapters = methods
            .iter()
            .map(|&m| Adapter::new(model, &config.with_method(m)))
            .collect::<Result<Vec<_>>>()?;
        let mut totals = vec![0.0f64; lanes];
        for (i, b) in batches.iter().enumerate() {
            // Rotate the start lane so no method is systematically first.
            for j in (0..lanes).map(|j| (j + i + rep) % lanes) {
                let start = Instant::now();
                if j == methods.len() {
                    std::hint::black_box(model.forward(b, &cbn)?);
                } else {
                    std::hint::black_box(adapters[j].step(b)?);
                }
                if i > 0 {
                    totals[j] += start.elapsed().as_secs_f64() * 1e3;
                }
            }
        }
        for (j, a) in adapters.iter().enumerate() {
            per_method[j].push(totals[j] / timed);
            support_bytes[j] = a
                .support()
                .map(|s| s.memory_bytes() + s.num_classes() * s.feature_dim() * 4)
                .unwrap_or(0);
        }
        baseline.push(totals[methods.len()] / timed);
    }

    let methods = methods
        .iter()
        .zip(per_method)
        .zip(support_bytes)
        .map(|((&method, times), support_bytes)| {
            let (mean_ms, std_ms) = mean_std(&times);
            MethodTiming {
                method,
                mean_ms,
                std_ms,
                runs: times.len(),
                support_bytes,
            }
        })
        .collect();
    Ok(BenchReport {
        batch_size: config.batch_size,
        batches_timed: batches.len() - 1,
        repetitions,
        forward_baseline_ms: mean_std(&baseline).0,
        methods,
    })
}
