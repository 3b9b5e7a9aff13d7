//! Per-subject windowed datasets: containers, segmentation, source-only
//! standardization, the synthetic shift generator, and the UCI-HAR loader.

mod synthetic;
mod uci;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape4, Tensor4};

pub use synthetic::{generate_synthetic, SyntheticSpec};
pub use uci::{
    load_layout, load_uci_har, write_layout, LayoutManifest, UCI_SIGNALS, UCI_SUBJECTS,
};

/// One labeled `H x W` window borrowed from a [`DomainDataset`].
#[derive(Debug, Clone, Copy)]
pub struct Window<'a> {
    /// Row-major `H x W` (time steps x sensor axes).
    pub data: &'a [f32],
    /// Class index in `0..K`.
    pub label: usize,
    pub subject: &'a str,
}

/// All windows recorded from one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    subject: String,
    num_classes: usize,
    /// `(H, W)`
    window: (usize, usize),
    samples: Vec<f32>,
    labels: Vec<usize>,
}

impl DomainDataset {
    pub fn new(
        subject: impl Into<String>,
        num_classes: usize,
        window: (usize, usize),
        samples: Vec<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        let per = window.0 * window.1;
        if per == 0 {
            return Err(Error::Data("window shape must be non-empty".into()));
        }
        if samples.len() != per * labels.len() {
            return Err(Error::Data(format!(
                "{} values do not form {} windows of {}x{}",
                samples.len(),
                labels.len(),
                window.0,
                window.1
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        Ok(Self {
            subject: subject.into(),
            num_classes,
            window,
            samples,
            labels,
        })
    }

    pub fn subject(&self) -> &str {
        &self.subject
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn window_shape(&self) -> (usize, usize) {
        self.window
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn window(&self, i: usize) -> Window<'_> {
        let per = self.window.0 * self.window.1;
        Window {
            data: &self.samples[i * per..(i + 1) * per],
            label: self.labels[i],
            subject: &self.subject,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Window<'_>> {
        (0..self.len()).map(|i| self.window(i))
    }

    /// Stack the selected windows into a `(B, 1, H, W)` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor4<f32> {
        let per = self.window.0 * self.window.1;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.window(i).data);
        }
        Tensor4::new(Shape4::new(indices.len(), 1, self.window.0, self.window.1), data)
            .expect("window sizes are consistent")
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let per = self.window.0 * self.window.1;
        let mut samples = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            samples.extend_from_slice(self.window(i).data);
            labels.push(self.labels[i]);
        }
        Self {
            subject: self.subject.clone(),
            num_classes: self.num_classes,
            window: self.window,
            samples,
            labels,
        }
    }

    /// Concatenate several domains (e.g. the LOOA sources) in order.
    pub fn pooled(subject: impl Into<String>, parts: &[&DomainDataset]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Data("pooling zero domains".into()))?;
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.window != first.window || p.num_classes != first.num_classes {
                return Err(Error::Data(format!(
                    "domain {} does not share shape/label space with {}",
                    p.subject, first.subject
                )));
            }
            samples.extend_from_slice(&p.samples);
            labels.extend_from_slice(&p.labels);
        }
        Self::new(subject, first.num_classes, first.window, samples, labels)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

/// Segment a row-major `T_total x W` series into `H x W` windows.
///
/// Stride is `floor(H * (1 - overlap))`, at least 1; a trailing remainder
/// shorter than `H` is dropped.
pub fn sliding_window(signal: &[f32], width: usize, window: usize, overlap: f64) -> Result<Vec<Vec<f32>>> {
    if width == 0 || window == 0 {
        return Err(Error::config("window and width must be positive"));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::config(format!("overlap {overlap} outside [0, 1)")));
    }
    if signal.len() % width != 0 {
        return Err(Error::Data(format!(
            "series of {} values is not a multiple of width {width}",
            signal.len()
        )));
    }
    let total = signal.len() / width;
    if total < window {
        log::warn!("series of {total} steps is shorter than window {window}; no segments");
        return Ok(Vec::new());
    }
    let stride = ((window as f64 * (1.0 - overlap)).floor() as usize).max(1);
    Ok((0..=(total - window))
        .step_by(stride)
        .map(|start| signal[start * width..(start + window) * width].to_vec())
        .collect())
}

/// Per-sensor-axis z-score parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl AxisStats {
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    /// Population mean/std per axis over every time step of every window.
    pub fn fit(domains: &[&DomainDataset]) -> Result<Self> {
        let first = domains
            .first()
            .ok_or_else(|| Error::Data("no domains to fit statistics on".into()))?;
        let w = first.window.1;
        let mut sum = vec![0.0f64; w];
        let mut count = 0usize;
        for d in domains {
            if d.window.1 != w {
                return Err(Error::Data("domains disagree on sensor axes".into()));
            }
            for row in d.samples.chunks_exact(w) {
                for (s, &v) in sum.iter_mut().zip(row) {
                    *s += v as f64;
                }
            }
            count += d.samples.len() / w;
        }
        if count == 0 {
            return Err(Error::Data("no samples to fit statistics on".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0f64; w];
        for d in domains {
            for row in d.samples.chunks_exact(w) {
                for ((s, &v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    let e = v as f64 - m;
                    *s += e * e;
                }
            }
        }
        let std = sq.iter().map(|s| (s / count as f64).sqrt()).collect();
        Ok(Self { mean, std })
    }
}

/// z-score every sensor axis with externally supplied (source) statistics.
/// Axes whose std is not positive pass through unchanged.
pub fn standardize(domain: &DomainDataset, stats: &AxisStats) -> Result<DomainDataset> {
    let w = domain.window.1;
    if stats.mean.len() != w || stats.std.len() != w {
        return Err(Error::shape(format!(
            "standardization for {} axes applied to {w}-axis windows",
            stats.mean.len()
        )));
    }
    let degenerate: Vec<bool> = stats.std.iter().map(|&s| !(s > 0.0)).collect();
    for (axis, _) in degenerate.iter().enumerate().filter(|(_, d)| **d) {
        log::warn!("axis {axis} has non-positive std; passing it through unscaled");
    }
    let mut out = domain.clone();
    for row in out.samples.chunks_exact_mut(w) {
        for (c, v) in row.iter_mut().enumerate() {
            if !degenerate[c] {
                *v = ((*v as f64 - stats.mean[c]) / stats.std[c]) as f32;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_overlap_offsets() {
        let series: Vec<f32> = (0..256).map(|i| i as f32).collect();
        let segs = sliding_window(&series, 1, 128, 0.5).unwrap();
        assert_eq!(segs.len(), 3);
        assert_eq!((segs[0][0], segs[1][0], segs[2][0]), (0.0, 64.0, 128.0));
    }

    #[test]
    fn zero_overlap_tiles() {
        let series: Vec<f32> = (0..20).map(|i| i as f32).collect();
        let segs = sliding_window(&series, 2, 3, 0.0).unwrap();
        assert_eq!(segs.len(), 3);
        assert_eq!(segs[1], vec![6.0, 7.0, 8.0, 9.0, 10.0, 11.0]);
    }

    #[test]
    fn short_series_gives_nothing() {
        assert!(sliding_window(&[0.0; 10], 2, 6, 0.5).unwrap().is_empty());
    }

    #[test]
    fn identity_stats_and_constant_axis() {
        let d = DomainDataset::new("s", 2, (2, 2), vec![1.0, 5.0, 2.0, 5.0], vec![1]).unwrap();
        let same = standardize(&d, &AxisStats::identity(2)).unwrap();
        assert_eq!(same.samples(), d.samples());
        let fitted = AxisStats::fit(&[&d]).unwrap();
        assert_eq!(fitted.std[1], 0.0);
        let z = standardize(&d, &fitted).unwrap();
        assert_eq!(z.samples(), &[-1.0, 5.0, 1.0, 5.0]);
    }

    #[test]
    fn rejects_out_of_range_labels() {
        assert!(DomainDataset::new("s", 2, (1, 1), vec![0.0], vec![2]).is_err());
    }
}
