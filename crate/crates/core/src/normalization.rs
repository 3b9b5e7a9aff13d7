//! Test-time resolution of batch-norm statistics.
//!
//! Every strategy reduces to a per-layer prior ratio `alpha(i)`: the
//! statistics applied at layer `i` are
//! `alpha * source + (1 - alpha) * test_batch`, interpolating means and
//! variances independently. `alpha = 1` is conventional BN (running
//! statistics), `alpha = 0` is pure test-batch BN.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::batchnorm::{BatchNormLayer, ChannelStats};
use crate::tensor::{Real, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormStrategy {
    /// Source running statistics.
    Cbn,
    /// Current test-batch statistics.
    Tbn,
    /// The same prior ratio at every layer.
    AlphaConst { alpha: f64 },
    /// Layer-wise geometric schedule from `bottom` (shallowest) to `top`.
    Edtn { bottom: f64, top: f64 },
}

impl NormStrategy {
    /// EDTN parameterized by a decay factor: `alpha(i) = lambda^(n - i)`.
    pub fn edtn_from_decay(lambda: f64, num_layers: usize) -> Result<Self> {
        check_unit("decay factor", lambda)?;
        if num_layers == 0 {
            return Err(Error::config("EDTN needs at least one BN layer"));
        }
        Ok(NormStrategy::Edtn {
            bottom: lambda.powi(num_layers as i32 - 1),
            top: 1.0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            NormStrategy::Cbn | NormStrategy::Tbn => Ok(()),
            NormStrategy::AlphaConst { alpha } => check_unit("alpha", alpha),
            NormStrategy::Edtn { bottom, top } => {
                check_unit("EDTN bottom ratio", bottom)?;
                check_unit("EDTN top ratio", top)?;
                if bottom > top {
                    return Err(Error::config(format!(
                        "EDTN bottom ratio {bottom} exceeds top ratio {top}"
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn schedule(&self, num_layers: usize) -> Result<AlphaSchedule> {
        self.validate()?;
        if num_layers == 0 {
            return Err(Error::config("schedule needs at least one BN layer"));
        }
        match *self {
            NormStrategy::Cbn => Ok(AlphaSchedule(vec![1.0; num_layers])),
            NormStrategy::Tbn => Ok(AlphaSchedule(vec![0.0; num_layers])),
            NormStrategy::AlphaConst { alpha } => Ok(AlphaSchedule(vec![alpha; num_layers])),
            NormStrategy::Edtn { bottom, top } => edtn_schedule(num_layers, bottom, top),
        }
    }
}

/// Per-BN-layer prior ratios, index 0 = shallowest layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule(pub Vec<f64>);

impl AlphaSchedule {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        for &a in &alphas {
            check_unit("alpha", a)?;
        }
        Ok(Self(alphas))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn alphas(&self) -> &[f64] {
        &self.0
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::config(format!("{name} must lie in [0, 1], got {v}")))
    }
}

/// Geometric interpolation between `bottom` at layer 1 and `top` at layer n.
///
/// `bottom = 0` gives zeros below the top layer. The last entry is `top`
/// exactly.
pub fn edtn_schedule(num_layers: usize, bottom: f64, top: f64) -> Result<AlphaSchedule> {
    NormStrategy::Edtn { bottom, top }.validate()?;
    let n = num_layers;
    if n == 0 {
        return Err(Error::config("schedule needs at least one BN layer"));
    }
    let mut alphas = vec![0.0; n];
    if bottom > 0.0 && n > 1 {
        let ratio = (top / bottom).powf(1.0 / (n - 1) as f64);
        for (i, a) in alphas.iter_mut().enumerate().take(n - 1) {
            *a = (bottom * ratio.powi(i as i32)).min(top);
        }
    }
    alphas[n - 1] = top;
    Ok(AlphaSchedule(alphas))
}

/// Population mean and variance per channel over the batch and spatial
/// axes (divisor `B*H*W`). Accumulates in 64 bits, two passes.
pub fn batch_stats<T: Real>(input: &Tensor4<T>) -> Result<ChannelStats<T>> {
    let s = input.shape();
    let count = s.batch * s.plane();
    if count == 0 || s.channels == 0 {
        return Err(Error::shape(format!("batch statistics of empty tensor {s}")));
    }
    let n = count as f64;
    let mut mean = Vec::with_capacity(s.channels);
    let mut var = Vec::with_capacity(s.channels);
    for c in 0..s.channels {
        let mut sum = 0.0f64;
        for b in 0..s.batch {
            sum += input.plane(b, c).iter().map(|v| v.as_f64()).sum::<f64>();
        }
        let mu = sum / n;
        let mut sq = 0.0f64;
        for b in 0..s.batch {
            sq += input
                .plane(b, c)
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mu;
                    d * d
                })
                .sum::<f64>();
        }
        mean.push(T::from_f64_lossy(mu));
        var.push(T::from_f64_lossy(sq / n));
    }
    Ok(ChannelStats { mean, var })
}

/// `alpha * source + (1 - alpha) * test` for means and variances.
pub fn mix_stats<T: Real>(
    source: &ChannelStats<T>,
    test: &ChannelStats<T>,
    alpha: f64,
) -> Result<ChannelStats<T>> {
    check_unit("alpha", alpha)?;
    if source.mean.len() != test.mean.len() || source.var.len() != test.var.len() {
        return Err(Error::shape("mixing statistics of different channel counts"));
    }
    let mix = |s: &[T], t: &[T]| -> Vec<T> {
        s.iter()
            .zip(t)
            .map(|(&a, &b)| T::from_f64_lossy(alpha * a.as_f64() + (1.0 - alpha) * b.as_f64()))
            .collect()
    };
    let mut var = mix(&source.var, &test.var);
    // convex combination of non-negatives; clamp only guards rounding
    for v in &mut var {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    Ok(ChannelStats {
        mean: mix(&source.mean, &test.mean),
        var,
    })
}

/// Statistics to apply at one BN layer given its prior ratio.
///
/// `alpha = 1` returns the running statistics without touching the batch;
/// `alpha = 0` returns the batch statistics verbatim.
pub fn resolve_with_alpha<T: Real>(
    alpha: f64,
    layer: &BatchNormLayer<T>,
    batch: &Tensor4<T>,
) -> Result<ChannelStats<T>> {
    check_unit("alpha", alpha)?;
    if alpha == 1.0 {
        return Ok(layer.running_stats());
    }
    let test = batch_stats(batch)?;
    if alpha == 0.0 {
        return Ok(test);
    }
    mix_stats(&layer.running_stats(), &test, alpha)
}

/// Statistics for BN layer `layer_index` (1-based, of `num_layers`) under
/// `strategy`. Never mutates the layer.
pub fn resolve_stats<T: Real>(
    layer_index: usize,
    num_layers: usize,
    layer: &BatchNormLayer<T>,
    batch: &Tensor4<T>,
    strategy: &NormStrategy,
) -> Result<ChannelStats<T>> {
    if layer_index == 0 || layer_index > num_layers {
        return Err(Error::config(format!(
            "layer index {layer_index} outside 1..={num_layers}"
        )));
    }
    let schedule = strategy.schedule(num_layers)?;
    resolve_with_alpha(schedule.0[layer_index - 1], layer, batch)
}
