use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::AxisStats;
use crate::error::{Error, Result};
use crate::nn::batchnorm::{bn_backward_batch, bn_forward, BatchNormLayer, ChannelStats};
use crate::nn::conv::{conv_backward, conv_forward, window_output, ConvLayer};
use crate::nn::linear::LinearHead;
use crate::nn::pool::{
    check_pool, global_avg_pool, global_avg_pool_backward, max_pool_backward, max_pool_indexed,
};
use crate::normalization::{batch_stats, resolve_with_alpha, AlphaSchedule, NormStrategy};
use crate::tensor::{Matrix, Real, Shape4, Tensor4};

/// Layer geometry of the Conv-BN-ReLU-MaxPool stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub name: String,
    /// Window length (time steps).
    pub input_height: usize,
    /// Sensor axes.
    pub input_width: usize,
    pub kernel: (usize, usize),
    pub conv_stride: (usize, usize),
    pub channels: Vec<usize>,
    /// Max-pool window, also used as its stride.
    pub pool: (usize, usize),
    pub num_classes: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl ArchSpec {
    fn preset(
        name: &str,
        input: (usize, usize),
        kernel: (usize, usize),
        channels: &[usize],
        pool: (usize, usize),
        num_classes: usize,
    ) -> Self {
        Self {
            name: name.to_string(),
            input_height: input.0,
            input_width: input.1,
            kernel,
            conv_stride: (1, 1),
            channels: channels.to_vec(),
            pool,
            num_classes,
            eps: crate::nn::batchnorm::DEFAULT_EPS,
            momentum: crate::nn::batchnorm::DEFAULT_MOMENTUM,
        }
    }

    /// 128 x 9 windows, (6, 1) kernels, 64/128/256 channels, 6 classes.
    pub fn uci_har() -> Self {
        Self::preset("uci", (128, 9), (6, 1), &[64, 128, 256], (2, 1), 6)
    }

    /// 30 x 77 windows, (9, 5) kernels. Pools only along the sensor axis:
    /// three (9, ·) kernels already consume 24 of the 30 time steps.
    pub fn opportunity() -> Self {
        Self::preset("oppo", (30, 77), (9, 5), &[64, 128, 256], (1, 2), 4)
    }

    /// 151 x 3 windows, (6, 1) kernels, 128/256/384 channels, 17 classes.
    pub fn unimib() -> Self {
        Self::preset("unimib", (151, 3), (6, 1), &[128, 256, 384], (2, 1), 17)
    }

    /// Narrow three-block variant used for the synthetic corpus.
    pub fn compact(input_height: usize, input_width: usize, num_classes: usize) -> Self {
        Self::preset(
            "compact",
            (input_height, input_width),
            (6, 1),
            &[16, 32, 64],
            (2, 1),
            num_classes,
        )
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "uci" => Some(Self::uci_har()),
            "oppo" => Some(Self::opportunity()),
            "unimib" => Some(Self::unimib()),
            _ => None,
        }
    }

    pub fn input_shape(&self, batch: usize) -> Shape4 {
        Shape4::new(batch, 1, self.input_height, self.input_width)
    }

    pub fn feature_dim(&self) -> usize {
        self.channels.last().copied().unwrap_or(0)
    }

    /// Per-block `(conv output, pool output)` shapes for a single sample.
    pub fn block_shapes(&self) -> Result<Vec<(Shape4, Shape4)>> {
        self.validate_scalars()?;
        let mut shape = self.input_shape(1);
        let mut out = Vec::with_capacity(self.channels.len());
        for (i, &c) in self.channels.iter().enumerate() {
            let (h, w) = window_output(shape, self.kernel, self.conv_stride)
                .map_err(|e| Error::config(format!("block {i} conv: {e}")))?;
            let conv = Shape4::new(1, c, h, w);
            let (ph, pw) = window_output(conv, self.pool, self.pool)
                .map_err(|e| Error::config(format!("block {i} pool: {e}")))?;
            shape = Shape4::new(1, c, ph, pw);
            out.push((conv, shape));
        }
        Ok(out)
    }

    fn validate_scalars(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::config("architecture needs positive channel widths"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("architecture needs at least two classes"));
        }
        if self.input_height == 0 || self.input_width == 0 {
            return Err(Error::config("architecture input must be non-empty"));
        }
        if !(self.eps > 0.0) || !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::config("batch-norm eps must be > 0 and momentum in [0, 1]"));
        }
        check_pool(self.pool, self.pool)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.block_shapes().map(|_| ())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T = f32> {
    pub conv: ConvLayer<T>,
    pub bn: BatchNormLayer<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T = f32> {
    /// `B x m` globally average-pooled features of the last block.
    pub features: Matrix<T>,
    /// `B x K` head outputs.
    pub logits: Matrix<T>,
}

/// Gradient buffers in [`NetworkModel::parameters`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T = f32>(pub Vec<Vec<T>>);

#[derive(Debug, Clone)]
struct BlockCache<T> {
    input: Tensor4<T>,
    normalized: Tensor4<T>,
    stats: ChannelStats<T>,
    activated: Tensor4<T>,
    argmax: Vec<usize>,
}

/// Activations retained by a training-mode forward for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T = f32> {
    blocks: Vec<BlockCache<T>>,
    pooled: Shape4,
    output: ForwardOutput<T>,
}

impl<T: Real> ForwardCache<T> {
    pub fn output(&self) -> &ForwardOutput<T> {
        &self.output
    }

    /// Batch statistics observed at each BN layer.
    pub fn batch_stats(&self) -> impl Iterator<Item = &ChannelStats<T>> {
        self.blocks.iter().map(|b| &b.stats)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel<T = f32> {
    pub arch: ArchSpec,
    pub blocks: Vec<Block<T>>,
    pub head: LinearHead<T>,
    /// Per-axis input standardization fitted on the source training data.
    pub input_norm: Option<AxisStats>,
}

impl<T: Real> NetworkModel<T> {
    /// Glorot-uniform conv/linear weights, zero biases, `gamma = 1`, `beta = 0`.
    pub fn init(arch: ArchSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(arch, |fan_in, fan_out| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            T::from_f64_lossy(rng.random_range(-limit..=limit))
        })
    }

    /// Every weight zero (BN layers still identity).
    pub fn zeros(arch: ArchSpec) -> Result<Self> {
        Self::build(arch, |_, _| T::zero())
    }

    fn build(arch: ArchSpec, mut weight: impl FnMut(usize, usize) -> T) -> Result<Self> {
        arch.validate()?;
        let (kh, kw) = arch.kernel;
        let eps = T::from_f64_lossy(arch.eps);
        let momentum = T::from_f64_lossy(arch.momentum);
        let mut blocks = Vec::with_capacity(arch.channels.len());
        let mut c_in = 1;
        for &c_out in &arch.channels {
            let shape = Shape4::new(c_out, c_in, kh, kw);
            let (fan_in, fan_out) = (c_in * kh * kw, c_out * kh * kw);
            let w: Vec<T> = (0..shape.len()).map(|_| weight(fan_in, fan_out)).collect();
            blocks.push(Block {
                conv: ConvLayer::new(Tensor4::new(shape, w)?, vec![T::zero(); c_out], arch.conv_stride)?,
                bn: BatchNormLayer::identity(c_out, eps, momentum),
            });
            c_in = c_out;
        }
        let m = arch.feature_dim();
        let k = arch.num_classes;
        let w: Vec<T> = (0..k * m).map(|_| weight(m, k)).collect();
        let head = LinearHead::new(Matrix::new(k, m, w)?, vec![T::zero(); k])?;
        Ok(Self {
            arch,
            blocks,
            head,
            input_norm: None,
        })
    }

    pub fn num_bn_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.head.feature_dim()
    }

    /// Structural consistency between `arch` and the stored tensors.
    pub fn validate(&self) -> Result<()> {
        let shapes = self.arch.block_shapes()?;
        if shapes.len() != self.blocks.len() {
            return Err(Error::shape(format!(
                "architecture has {} blocks, model has {}",
                shapes.len(),
                self.blocks.len()
            )));
        }
        let mut c_in = 1;
        for (i, (block, &c_out)) in self.blocks.iter().zip(&self.arch.channels).enumerate() {
            let ws = block.conv.weight.shape();
            let expect = Shape4::new(c_out, c_in, self.arch.kernel.0, self.arch.kernel.1);
            if ws != expect {
                return Err(Error::shape(format!("block {i} conv weight {ws}, expected {expect}")));
            }
            block.bn.validate()?;
            if block.bn.channels() != c_out {
                return Err(Error::shape(format!("block {i} batch-norm width mismatch")));
            }
            c_in = c_out;
        }
        if self.head.feature_dim() != self.arch.feature_dim()
            || self.head.num_classes() != self.arch.num_classes
        {
            return Err(Error::shape("head does not match architecture"));
        }
        if let Some(norm) = &self.input_norm {
            if norm.mean.len() != self.arch.input_width {
                return Err(Error::shape("input standardization width mismatch"));
            }
        }
        Ok(())
    }

    fn check_input(&self, batch: &Tensor4<T>) -> Result<()> {
        let s = batch.shape();
        let want = self.arch.input_shape(s.batch);
        if s != want || s.batch == 0 {
            return Err(Error::shape(format!("model expects input {want}, got {s}")));
        }
        Ok(())
    }

    /// Eval-mode forward with statistics resolved by `strategy`.
    pub fn forward(&self, batch: &Tensor4<T>, strategy: &NormStrategy) -> Result<ForwardOutput<T>> {
        let schedule = strategy.schedule(self.num_bn_layers())?;
        self.forward_with_schedule(batch, &schedule)
    }

    pub fn forward_with_schedule(
        &self,
        batch: &Tensor4<T>,
        schedule: &AlphaSchedule,
    ) -> Result<ForwardOutput<T>> {
        let (out, _) = self.forward_eval_inner(batch, schedule, false)?;
        Ok(out)
    }

    /// Eval-mode forward that also returns every block's pooled output.
    pub fn forward_trace(
        &self,
        batch: &Tensor4<T>,
        strategy: &NormStrategy,
    ) -> Result<(ForwardOutput<T>, Vec<Tensor4<T>>)> {
        let schedule = strategy.schedule(self.num_bn_layers())?;
        self.forward_eval_inner(batch, &schedule, true)
    }

    fn forward_eval_inner(
        &self,
        batch: &Tensor4<T>,
        schedule: &AlphaSchedule,
        keep: bool,
    ) -> Result<(ForwardOutput<T>, Vec<Tensor4<T>>)> {
        if schedule.len() != self.num_bn_layers() {
            return Err(Error::config(format!(
                "schedule has {} ratios for {} BN layers",
                schedule.len(),
                self.num_bn_layers()
            )));
        }
        self.check_input(batch)?;
        let mut trace = Vec::new();
        let mut x: Option<Tensor4<T>> = None;
        for (block, &alpha) in self.blocks.iter().zip(schedule.alphas()) {
            let z = conv_forward(x.as_ref().unwrap_or(batch), &block.conv)?;
            let stats = resolve_with_alpha(alpha, &block.bn, &z)?;
            let mut y = bn_forward(&z, &block.bn, &stats)?;
            relu_in_place(&mut y);
            let (p, _) = max_pool_indexed(&y, self.arch.pool, self.arch.pool)?;
            if keep {
                trace.push(p.clone());
            }
            x = Some(p);
        }
        let last = x.expect("at least one block");
        let features = global_avg_pool(&last);
        let logits = self.head.forward(&features)?;
        Ok((ForwardOutput { features, logits }, trace))
    }

    /// Training-mode forward using batch statistics, without touching the
    /// running statistics. Keeps everything the backward pass needs.
    pub fn forward_cached(&self, batch: &Tensor4<T>) -> Result<ForwardCache<T>> {
        self.check_input(batch)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        let mut x = batch.clone();
        for block in &self.blocks {
            let z = conv_forward(&x, &block.conv)?;
            let stats = batch_stats(&z)?;
            let plain = BatchNormLayer {
                gamma: vec![T::one(); block.bn.channels()],
                beta: vec![T::zero(); block.bn.channels()],
                ..block.bn.clone()
            };
            let normalized = bn_forward(&z, &plain, &stats)?;
            let mut activated = bn_forward(&z, &block.bn, &stats)?;
            relu_in_place(&mut activated);
            let (p, argmax) = max_pool_indexed(&activated, self.arch.pool, self.arch.pool)?;
            blocks.push(BlockCache {
                input: std::mem::replace(&mut x, p),
                normalized,
                stats,
                activated,
                argmax,
            });
        }
        let features = global_avg_pool(&x);
        let logits = self.head.forward(&features)?;
        Ok(ForwardCache {
            blocks,
            pooled: x.shape(),
            output: ForwardOutput { features, logits },
        })
    }

    /// Training-mode forward: batch statistics plus momentum update of the
    /// running statistics.
    pub fn forward_train(&mut self, batch: &Tensor4<T>) -> Result<ForwardCache<T>> {
        let cache = self.forward_cached(batch)?;
        for (block, bc) in self.blocks.iter_mut().zip(&cache.blocks) {
            block.bn.update_running(&bc.stats);
        }
        Ok(cache)
    }

    /// Mean softmax cross-entropy of `cache` against `labels` and its
    /// gradient with respect to every parameter.
    pub fn backward(&self, cache: &ForwardCache<T>, labels: &[usize]) -> Result<(f64, Gradients<T>)> {
        let logits = &cache.output.logits;
        let b = logits.rows();
        let k = logits.cols();
        if labels.len() != b {
            return Err(Error::shape(format!("{} labels for batch of {b}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Data(format!("label {bad} outside 0..{k}")));
        }
        let (loss, d_logits) = softmax_cross_entropy(logits, labels);

        // head
        let features = &cache.output.features;
        let m = features.cols();
        let mut d_head_w = Matrix::<T>::zeros(k, m);
        let mut d_head_b = vec![T::zero(); k];
        let mut d_features = Matrix::<T>::zeros(b, m);
        for r in 0..b {
            let h = features.row(r);
            let g = d_logits.row(r);
            for c in 0..k {
                let gc = g[c];
                d_head_b[c] += gc;
                for (dw, &hv) in d_head_w.row_mut(c).iter_mut().zip(h) {
                    *dw += gc * hv;
                }
                let w = self.head.weight.row(c);
                for (df, &wv) in d_features.row_mut(r).iter_mut().zip(w) {
                    *df += gc * wv;
                }
            }
        }

        let mut grad = global_avg_pool_backward(&d_features, cache.pooled);
        let mut block_grads = Vec::with_capacity(self.blocks.len());
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            let mut d_act = max_pool_backward(&grad, &bc.argmax, bc.activated.shape());
            for (d, &a) in d_act.data_mut().iter_mut().zip(bc.activated.data()) {
                if a <= T::zero() {
                    *d = T::zero();
                }
            }
            let (d_z, d_gamma, d_beta) = bn_backward_batch(&d_act, &bc.normalized, &block.bn, &bc.stats);
            let (d_x, d_w, d_b) = conv_backward(&bc.input, &block.conv, &d_z);
            block_grads.push(vec![d_w.into_data(), d_b, d_gamma, d_beta]);
            grad = d_x;
        }
        block_grads.reverse();
        let mut all: Vec<Vec<T>> = block_grads.into_iter().flatten().collect();
        all.push(d_head_w.data().to_vec());
        all.push(d_head_b);
        Ok((loss, Gradients(all)))
    }

    /// Trainable tensors: per block conv weight, conv bias, BN gamma, BN
    /// beta; then head weight and head bias.
    pub fn parameters(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = Vec::with_capacity(4 * self.blocks.len() + 2);
        for b in &self.blocks {
            v.push(b.conv.weight.data());
            v.push(&b.conv.bias);
            v.push(&b.bn.gamma);
            v.push(&b.bn.beta);
        }
        v.push(self.head.weight.data());
        v.push(&self.head.bias);
        v
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut [T]> {
        let mut v: Vec<&mut [T]> = Vec::with_capacity(4 * self.blocks.len() + 2);
        for b in &mut self.blocks {
            v.push(b.conv.weight.data_mut());
            v.push(&mut b.conv.bias);
            v.push(&mut b.bn.gamma);
            v.push(&mut b.bn.beta);
        }
        v.push(self.head.weight.data_mut());
        v.push(&mut self.head.bias);
        v
    }

    pub fn parameter_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for i in 0..self.blocks.len() {
            for p in ["conv.weight", "conv.bias", "bn.gamma", "bn.beta"] {
                v.push(format!("blocks.{i}.{p}"));
            }
        }
        v.push("head.weight".into());
        v.push("head.bias".into());
        v
    }

    /// SHA-256 over the architecture, every parameter, and every running
    /// statistic.
    pub fn param_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.arch).expect("arch serializes"));
        let mut feed = |xs: &[T]| {
            h.update((xs.len() as u64).to_le_bytes());
            for x in xs {
                h.update(x.as_f64().to_le_bytes());
            }
        };
        for p in self.parameters() {
            feed(p);
        }
        for b in &self.blocks {
            feed(&b.bn.running_mean);
            feed(&b.bn.running_var);
            feed(std::slice::from_ref(&b.bn.eps));
            feed(std::slice::from_ref(&b.bn.momentum));
        }
        if let Some(n) = &self.input_norm {
            for v in n.mean.iter().chain(&n.std) {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub fn cast<U: Real>(&self) -> NetworkModel<U> {
        let c = |v: &[T]| -> Vec<U> { v.iter().map(|&x| U::from_f64_lossy(x.as_f64())).collect() };
        NetworkModel {
            arch: self.arch.clone(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    conv: ConvLayer {
                        weight: b.conv.weight.cast(),
                        bias: c(&b.conv.bias),
                        stride: b.conv.stride,
                    },
                    bn: BatchNormLayer {
                        gamma: c(&b.bn.gamma),
                        beta: c(&b.bn.beta),
                        running_mean: c(&b.bn.running_mean),
                        running_var: c(&b.bn.running_var),
                        eps: U::from_f64_lossy(b.bn.eps.as_f64()),
                        momentum: U::from_f64_lossy(b.bn.momentum.as_f64()),
                    },
                })
                .collect(),
            head: LinearHead {
                weight: Matrix::new(
                    self.head.weight.rows(),
                    self.head.weight.cols(),
                    c(self.head.weight.data()),
                )
                .expect("same shape"),
                bias: c(&self.head.bias),
            },
            input_norm: self.input_norm.clone(),
        }
    }
}

/// Forward in either mode. Train mode ignores `strategy` and updates the
/// running statistics; eval mode never mutates the model.
pub fn network_forward<T: Real>(
    model: &mut NetworkModel<T>,
    batch: &Tensor4<T>,
    strategy: &NormStrategy,
    mode: Mode,
) -> Result<ForwardOutput<T>> {
    match mode {
        Mode::Train => Ok(model.forward_train(batch)?.output),
        Mode::Eval => model.forward(batch, strategy),
    }
}

fn relu_in_place<T: Real>(t: &mut Tensor4<T>) {
    for v in t.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Mean cross-entropy and its logit gradient `(softmax - onehot) / B`.
pub(crate) fn softmax_cross_entropy<T: Real>(logits: &Matrix<T>, labels: &[usize]) -> (f64, Matrix<T>) {
    let b = logits.rows();
    let mut grad = Matrix::zeros(b, logits.cols());
    let mut loss = 0.0f64;
    let inv_b = 1.0 / b as f64;
    for (r, &y) in labels.iter().enumerate() {
        let probs = crate::metrics::softmax(logits.row(r));
        loss -= probs[y].max(f64::MIN_POSITIVE).ln();
        for (c, (g, p)) in grad.row_mut(r).iter_mut().zip(&probs).enumerate() {
            let target = if c == y { 1.0 } else { 0.0 };
            *g = T::from_f64_lossy((p - target) * inv_b);
        }
    }
    (loss * inv_b, grad)
}
