//! Batch-normalization layer. Which statistics get applied is decided by
//! [`crate::normalization`]; this module only standardizes with them.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer<T = f32> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub eps: T,
    pub momentum: T,
}

/// Per-channel mean and (population) variance.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStats<T = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> ChannelStats<T> {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

impl<T: Real> BatchNormLayer<T> {
    /// Fresh layer: `gamma = 1`, `beta = 0`, running statistics `(0, 1)`.
    pub fn identity(channels: usize, eps: T, momentum: T) -> Self {
        Self {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            eps,
            momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn running_stats(&self) -> ChannelStats<T> {
        ChannelStats {
            mean: self.running_mean.clone(),
            var: self.running_var.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if self.beta.len() != c || self.running_mean.len() != c || self.running_var.len() != c {
            return Err(Error::shape(format!(
                "batch-norm vectors disagree on channel count ({c}, {}, {}, {})",
                self.beta.len(),
                self.running_mean.len(),
                self.running_var.len()
            )));
        }
        if self.running_var.iter().any(|v| !(*v >= T::zero())) {
            return Err(Error::Data("negative or NaN running variance".into()));
        }
        if !(self.eps >= T::zero()) {
            return Err(Error::config("batch-norm eps must be non-negative"));
        }
        Ok(())
    }

    /// Exponential moving-average update used in training mode.
    pub(crate) fn update_running(&mut self, batch: &ChannelStats<T>) {
        let m = self.momentum;
        let keep = T::one() - m;
        for c in 0..self.channels() {
            self.running_mean[c] = keep * self.running_mean[c] + m * batch.mean[c];
            self.running_var[c] = keep * self.running_var[c] + m * batch.var[c];
        }
    }
}

/// `out = gamma * (z - mean) / sqrt(var + eps) + beta`, per channel.
pub fn bn_forward<T: Real>(
    input: &Tensor4<T>,
    layer: &BatchNormLayer<T>,
    stats: &ChannelStats<T>,
) -> Result<Tensor4<T>> {
    let s = input.shape();
    let c = layer.channels();
    if s.channels != c || stats.mean.len() != c || stats.var.len() != c {
        return Err(Error::shape(format!(
            "batch-norm over {c} channels given input {s} and stats of length {}/{}",
            stats.mean.len(),
            stats.var.len()
        )));
    }
    let scale: Vec<T> = (0..c)
        .map(|ch| layer.gamma[ch] / (stats.var[ch] + layer.eps).sqrt())
        .collect();
    let mut out = Tensor4::zeros(s);
    for b in 0..s.batch {
        for ch in 0..c {
            let (mu, k, shift) = (stats.mean[ch], scale[ch], layer.beta[ch]);
            let src = input.plane(b, ch);
            for (o, &z) in out.plane_mut(b, ch).iter_mut().zip(src) {
                *o = (z - mu) * k + shift;
            }
        }
    }
    Ok(out)
}

/// Backward through batch-norm driven by its own batch statistics.
///
/// `normalized` is `(z - mean) / sqrt(var + eps)` from the forward pass.
/// Returns `(d_input, d_gamma, d_beta)`.
pub(crate) fn bn_backward_batch<T: Real>(
    grad_out: &Tensor4<T>,
    normalized: &Tensor4<T>,
    layer: &BatchNormLayer<T>,
    stats: &ChannelStats<T>,
) -> (Tensor4<T>, Vec<T>, Vec<T>) {
    let s = grad_out.shape();
    let c = layer.channels();
    let n = (s.batch * s.plane()) as f64;
    let mut d_gamma = vec![T::zero(); c];
    let mut d_beta = vec![T::zero(); c];
    let mut d_in = Tensor4::zeros(s);
    for ch in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for b in 0..s.batch {
            for (&g, &xh) in grad_out.plane(b, ch).iter().zip(normalized.plane(b, ch)) {
                sum_dy += g.as_f64();
                sum_dy_xhat += (g * xh).as_f64();
            }
        }
        d_beta[ch] = T::from_f64_lossy(sum_dy);
        d_gamma[ch] = T::from_f64_lossy(sum_dy_xhat);
        let gamma = layer.gamma[ch];
        let inv_std = T::one() / (stats.var[ch] + layer.eps).sqrt();
        let mean_dy = T::from_f64_lossy(sum_dy / n);
        let mean_dy_xhat = T::from_f64_lossy(sum_dy_xhat / n);
        let k = gamma * inv_std;
        for b in 0..s.batch {
            let g = grad_out.plane(b, ch);
            let xh = normalized.plane(b, ch);
            for ((d, &gv), &x) in d_in.plane_mut(b, ch).iter_mut().zip(g).zip(xh) {
                *d = k * (gv - mean_dy - x * mean_dy_xhat);
            }
        }
    }
    (d_in, d_gamma, d_beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn unit_stats_are_identity() {
        let mut l = BatchNormLayer::<f32>::identity(2, 0.0, 0.1);
        l.gamma = vec![1.0, 1.0];
        let input = Tensor4::new(Shape4::new(1, 2, 2, 1), vec![0.3, -1.7, 2.5, 1e-3]).unwrap();
        let stats = ChannelStats {
            mean: vec![0.0, 0.0],
            var: vec![1.0, 1.0],
        };
        let out = bn_forward(&input, &l, &stats).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn constant_channel_shifts_to_beta() {
        let mut l = BatchNormLayer::<f32>::identity(1, 1e-5, 0.1);
        l.beta = vec![5.0];
        let input = Tensor4::filled(Shape4::new(3, 1, 4, 2), 2.75f32);
        let stats = ChannelStats {
            mean: vec![2.75],
            var: vec![0.0],
        };
        let out = bn_forward(&input, &l, &stats).unwrap();
        assert!(out.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn stats_length_checked() {
        let l = BatchNormLayer::<f32>::identity(2, 1e-5, 0.1);
        let input = Tensor4::<f32>::zeros(Shape4::new(1, 2, 1, 1));
        let stats = ChannelStats {
            mean: vec![0.0],
            var: vec![1.0],
        };
        assert!(bn_forward(&input, &l, &stats).is_err());
    }

    #[test]
    fn running_update_is_ema() {
        let mut l = BatchNormLayer::<f64>::identity(1, 1e-5, 0.1);
        l.update_running(&ChannelStats {
            mean: vec![2.0],
            var: vec![3.0],
        });
        assert!((l.running_mean[0] - 0.2).abs() < 1e-12);
        assert!((l.running_var[0] - 1.2).abs() < 1e-12);
    }
}
