//! Direct, unoptimized reference implementations used as test oracles.

use oftta::tensor::{Matrix, Tensor4};

/// Valid cross-correlation with stride, one nested loop per index.
pub fn conv(input: &Tensor4<f32>, weight: &Tensor4<f32>, bias: &[f32], stride: (usize, usize)) -> Vec<f64> {
    let s = input.shape();
    let w = weight.shape();
    let oh = (s.height - w.height) / stride.0 + 1;
    let ow = (s.width - w.width) / stride.1 + 1;
    let mut out = Vec::with_capacity(s.batch * w.batch * oh * ow);
    for b in 0..s.batch {
        for o in 0..w.batch {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = bias[o] as f64;
                    for c in 0..s.channels {
                        for i in 0..w.height {
                            for j in 0..w.width {
                                acc += input.get(b, c, y * stride.0 + i, x * stride.1 + j) as f64
                                    * weight.get(o, c, i, j) as f64;
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

pub fn max_pool(input: &Tensor4<f32>, k: (usize, usize), s: (usize, usize)) -> Vec<f32> {
    let sh = input.shape();
    let oh = (sh.height - k.0) / s.0 + 1;
    let ow = (sh.width - k.1) / s.1 + 1;
    let mut out = Vec::new();
    for b in 0..sh.batch {
        for c in 0..sh.channels {
            for y in 0..oh {
                for x in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    for i in 0..k.0 {
                        for j in 0..k.1 {
                            best = best.max(input.get(b, c, y * s.0 + i, x * s.1 + j));
                        }
                    }
                    out.push(best);
                }
            }
        }
    }
    out
}

pub fn global_avg_pool(input: &Tensor4<f32>) -> Vec<f64> {
    let s = input.shape();
    let mut out = Vec::new();
    for b in 0..s.batch {
        for c in 0..s.channels {
            let mut sum = 0.0;
            let mut count = 0;
            for y in 0..s.height {
                for x in 0..s.width {
                    sum += input.get(b, c, y, x) as f64;
                    count += 1;
                }
            }
            out.push(sum / count as f64);
        }
    }
    out
}

/// Per-channel population moments, two passes.
pub fn channel_moments(t: &Tensor4<f32>) -> (Vec<f64>, Vec<f64>) {
    let s = t.shape();
    let mut means = Vec::new();
    let mut vars = Vec::new();
    for c in 0..s.channels {
        let mut vals = Vec::new();
        for b in 0..s.batch {
            for y in 0..s.height {
                for x in 0..s.width {
                    vals.push(t.get(b, c, y, x) as f64);
                }
            }
        }
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        means.push(m);
        vars.push(vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n);
    }
    (means, vars)
}

/// Macro-F1 from raw label lists: per class `2TP / (2TP + FP + FN)`,
/// zero when the denominator is zero.
pub fn macro_f1(truth: &[usize], pred: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..k {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fneg = 0usize;
        for (&t, &p) in truth.iter().zip(pred) {
            match (t == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fneg += 1,
                _ => {}
            }
        }
        let den = 2 * tp + fp + fneg;
        if den > 0 {
            total += 2.0 * tp as f64 / den as f64;
        }
    }
    total / k as f64
}

/// HSIC-based linear CKA through explicit `N x N` Gram matrices.
pub fn cka(x: &Matrix<f64>, y: &Matrix<f64>) -> f64 {
    let n = x.rows();
    let gram = |m: &Matrix<f64>| -> Vec<f64> {
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                g[i * n + j] = m.row(i).iter().zip(m.row(j)).map(|(a, b)| a * b).sum();
            }
        }
        g
    };
    let center = |g: &[f64]| -> Vec<f64> {
        // H G H with H = I - 11^T / n
        let mut h = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                h[i * n + j] = if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64;
            }
        }
        let mul = |a: &[f64], b: &[f64]| -> Vec<f64> {
            let mut c = vec![0.0; n * n];
            for i in 0..n {
                for k in 0..n {
                    for j in 0..n {
                        c[i * n + j] += a[i * n + k] * b[k * n + j];
                    }
                }
            }
            c
        };
        mul(&mul(&h, g), &h)
    };
    let hsic = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(p, q)| p * q).sum() };
    let k = center(&gram(x));
    let l = center(&gram(y));
    hsic(&k, &l) / (hsic(&k, &k) * hsic(&l, &l)).sqrt()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

pub fn cross_entropy(logits: &Matrix<f64>, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        total -= softmax(logits.row(r))[y].ln();
    }
    total / labels.len() as f64
}

/// First index of the maximum.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Brute-force replay of the batch-synchronous support-set update. Each
/// batch: score every feature, append it normalized to its pseudo-label's
/// list, keep the `capacity` lowest entropies per class (older first on
/// ties), recompute centroids, predict by cosine.
pub struct SupportOracle {
    /// Per class: (unit feature, entropy, arrival order).
    pub lists: Vec<Vec<(Vec<f64>, f64, usize)>>,
    pub capacity: Option<usize>,
    arrivals: usize,
}

pub enum Scoring<'a> {
    Linear { weight: &'a [Vec<f64>], bias: &'a [f64] },
    Cosine,
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| x / n).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

impl SupportOracle {
    pub fn seeded(weight: &[Vec<f64>], capacity: Option<usize>) -> Self {
        let lists = weight.iter().enumerate().map(|(k, w)| vec![(unit(w), 0.0, k)]).collect();
        Self {
            lists,
            capacity,
            arrivals: weight.len(),
        }
    }

    pub fn centroids(&self) -> Vec<Vec<f64>> {
        self.lists
            .iter()
            .map(|list| {
                let d = list[0].0.len();
                let mut c = vec![0.0; d];
                for (f, _, _) in list {
                    for i in 0..d {
                        c[i] += f[i];
                    }
                }
                c.iter().map(|v| v / list.len() as f64).collect()
            })
            .collect()
    }

    /// Returns (pseudo-labels, final predictions).
    pub fn step(&mut self, batch: &[Vec<f64>], scoring: &Scoring) -> (Vec<usize>, Vec<usize>) {
        let before = self.centroids();
        let mut pseudo = Vec::new();
        for h in batch {
            let scores: Vec<f64> = match scoring {
                Scoring::Linear { weight, bias } => weight
                    .iter()
                    .zip(*bias)
                    .map(|(w, b)| w.iter().zip(h).map(|(a, x)| a * x).sum::<f64>() + b)
                    .collect(),
                Scoring::Cosine => before.iter().map(|c| cosine(h, c)).collect(),
            };
            let label = argmax(&scores);
            let ent = entropy(&softmax(&scores));
            pseudo.push(label);
            self.lists[label].push((unit(h), ent, self.arrivals));
            self.arrivals += 1;
        }
        if let Some(m) = self.capacity {
            for list in &mut self.lists {
                list.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.2.cmp(&b.2)));
                list.truncate(m);
            }
        }
        let after = self.centroids();
        let preds = batch
            .iter()
            .map(|h| argmax(&after.iter().map(|c| cosine(h, c)).collect::<Vec<_>>()))
            .collect();
        (pseudo, preds)
    }
}
