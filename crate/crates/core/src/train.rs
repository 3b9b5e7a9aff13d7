//! Source-domain ERM training with analytic gradients and Adam.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{standardize, AxisStats, DomainDataset};
use crate::error::{Error, Result};
use crate::nn::{ArchSpec, Gradients, NetworkModel};
use crate::normalization::NormStrategy;
use crate::tensor::Tensor4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub validation_fraction: f64,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            lr_decay: 0.5,
            lr_decay_every: 20,
            epochs: 100,
            batch_size: 128,
            validation_fraction: 0.2,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return fail(format!("lr_decay must lie in (0, 1], got {}", self.lr_decay));
        }
        if self.lr_decay_every == 0 {
            return fail("lr_decay_every must be at least 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return fail(format!(
                "validation_fraction must lie in (0, 1), got {}",
                self.validation_fraction
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive".into());
        }
        Ok(())
    }
}

/// Step schedule `lr * decay^floor(epoch / every)`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.learning_rate * config.lr_decay.powi((epoch / config.lr_decay_every) as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Best-validation-loss snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: NetworkModel<f32>,
    pub val_loss: f64,
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

/// Adam with bias correction over flat parameter buffers.
#[derive(Debug, Clone)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f32]>, grads: &Gradients<f32>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.into_iter().zip(&grads.0).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let update = lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
                *p = (*p as f64 - update) as f32;
            }
        }
    }
}

/// Loss and gradients for every parameter from a batch-statistics forward.
/// Does not touch the running statistics.
pub fn backward_pass<T: crate::tensor::Real>(
    model: &NetworkModel<T>,
    batch: &Tensor4<T>,
    labels: &[usize],
) -> Result<(f64, Gradients<T>)> {
    let cache = model.forward_cached(batch)?;
    model.backward(&cache, labels)
}

/// Stratified split: `round(n_c * fraction)` samples of each class go to
/// validation, chosen by `rng`. Returns `(train, validation)` indices.
pub fn stratified_split(labels: &[usize], num_classes: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for k in 0..num_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        idx.shuffle(rng);
        let n_val = ((idx.len() as f64 * fraction).round() as usize).min(idx.len().saturating_sub(1));
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Mean eval-mode (running statistics) cross-entropy over `indices`.
fn eval_loss(model: &NetworkModel<f32>, data: &DomainDataset, indices: &[usize], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size) {
        let out = model.forward(&data.batch(chunk), &NormStrategy::Cbn)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
        let (loss, _) = crate::nn::model::softmax_cross_entropy(&out.logits, &labels);
        total += loss * chunk.len() as f64;
    }
    Ok(total / indices.len() as f64)
}

/// Train a freshly initialized model on the pooled sources and return the
/// checkpoint with the lowest validation loss.
pub fn train_erm(sources: &[&DomainDataset], arch: &ArchSpec, config: &TrainConfig) -> Result<Checkpoint> {
    config.validate()?;
    if sources.is_empty() {
        return Err(Error::config("training needs at least one source domain"));
    }
    let pooled = DomainDataset::pooled("source", sources)?;
    if pooled.window_shape() != (arch.input_height, arch.input_width) || pooled.num_classes() != arch.num_classes {
        return Err(Error::shape(format!(
            "sources are {:?} windows with {} classes, architecture expects {}x{} with {}",
            pooled.window_shape(),
            pooled.num_classes(),
            arch.input_height,
            arch.input_width,
            arch.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let (mut train_idx, val_idx) = stratified_split(pooled.labels(), pooled.num_classes(), config.validation_fraction, &mut rng);
    if val_idx.is_empty() || train_idx.is_empty() {
        return Err(Error::Data(format!(
            "{} source samples are too few for a {} validation split",
            pooled.len(),
            config.validation_fraction
        )));
    }
    let stats = AxisStats::fit(&[&pooled.subset(&train_idx)])?;
    let data = standardize(&pooled, &stats)?;

    let mut model = NetworkModel::<f32>::init(arch.clone(), config.seed)?;
    model.input_norm = Some(stats);
    let sizes: Vec<usize> = model.parameters().iter().map(|p| p.len()).collect();
    let mut adam = Adam::new(&sizes, config.beta1, config.beta2, config.adam_eps);

    let mut best: Option<(f64, usize, NetworkModel<f32>)> = None;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = lr_at(epoch, config);
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in train_idx.chunks(config.batch_size).enumerate() {
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels()[i]).collect();
            let cache = model.forward_train(&data.batch(chunk))?;
            let (loss, grads) = model.backward(&cache, &labels)?;
            if !loss.is_finite() || grads.0.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "training diverged at epoch {epoch}, batch {b} (loss {loss})"
                )));
            }
            loss_sum += loss * chunk.len() as f64;
            adam.step(model.parameters_mut(), &grads, lr);
        }
        let train_loss = loss_sum / train_idx.len() as f64;
        let val_loss = eval_loss(&model, &data, &val_idx, config.batch_size.max(256))?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric(format!("validation loss is {val_loss} at epoch {epoch}")));
        }
        log::debug!("epoch {epoch}: lr {lr:.2e} train {train_loss:.4} val {val_loss:.4}");
        history.push(EpochLog {
            epoch,
            lr,
            train_loss,
            val_loss,
        });
        if best.as_ref().is_none_or(|(l, _, _)| val_loss < *l) {
            best = Some((val_loss, epoch, model.clone()));
        }
    }
    let (val_loss, epoch, model) = best.expect("at least one epoch");
    Ok(Checkpoint {
        model,
        val_loss,
        epoch,
        history,
    })
}

/// Run independent jobs on up to `available_parallelism` threads,
/// preserving input order.
pub(crate) fn par_map<I: Sync, O: Send>(items: &[I], f: impl Fn(&I) -> O + Sync) -> Vec<O> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<O>> = (0..items.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                results.lock().expect("no poisoned worker")[i] = Some(out);
            });
        }
    });
    slots.into_iter().map(|o| o.expect("every job ran")).collect()
}

/// One checkpoint per domain, trained on all the other domains.
pub fn train_looa(domains: &[DomainDataset], arch: &ArchSpec, config: &TrainConfig) -> Result<Vec<Checkpoint>> {
    let folds: Vec<usize> = (0..domains.len()).collect();
    par_map(&folds, |&held| {
        let sources: Vec<&DomainDataset> = domains.iter().enumerate().filter(|(i, _)| *i != held).map(|(_, d)| d).collect();
        log::info!("training fold without `{}`", domains[held].subject());
        train_erm(&sources, arch, config)
    })
    .into_iter()
    .collect()
}

/// One checkpoint per domain, trained on that domain alone.
pub fn train_single_source(domains: &[DomainDataset], arch: &ArchSpec, config: &TrainConfig) -> Result<Vec<Checkpoint>> {
    par_map(domains, |d| {
        log::info!("training on `{}`", d.subject());
        train_erm(&[d], arch, config)
    })
    .into_iter()
    .collect()
}
