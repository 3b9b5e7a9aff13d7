#![allow(dead_code)]

pub mod oracles;
pub mod trace;

use oftta::data::{generate_synthetic, DomainDataset, SyntheticSpec};
use oftta::nn::ArchSpec;
use oftta::tensor::{Matrix, Shape4, Tensor4};
use oftta::train::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape4) -> Tensor4<f32> {
    let data = (0..shape.len()).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    Tensor4::new(shape, data).unwrap()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

/// Two small blocks on 12 x 2 windows, 3 classes.
pub fn tiny_arch() -> ArchSpec {
    ArchSpec {
        name: "tiny".into(),
        input_height: 12,
        input_width: 2,
        kernel: (3, 1),
        conv_stride: (1, 1),
        channels: vec![3, 4],
        pool: (2, 1),
        num_classes: 3,
        eps: 1e-5,
        momentum: 0.1,
    }
}

/// Short-window corpus for fast engine tests.
pub fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        length: 48,
        samples_per_class: 8,
        seed,
        ..Default::default()
    }
}

pub fn small_corpus(seed: u64) -> Vec<DomainDataset> {
    generate_synthetic(&small_spec(seed)).unwrap()
}

pub fn small_arch() -> ArchSpec {
    ArchSpec::compact(48, 3, 6)
}

/// Training recipe used for the desk-scale synthetic corpus.
pub fn synthetic_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 15,
        learning_rate: 1e-3,
        batch_size: 32,
        ..Default::default()
    }
}

pub fn percent(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

/// Per-parameter-tensor relative error between analytic gradients and
/// central differences (step `h`) of an independently computed
/// cross-entropy, on a randomized tiny 2-block network in f64.
pub fn gradient_check(seed: u64, h: f64) -> Vec<(String, f64)> {
    use oftta::nn::NetworkModel;
    use oftta::train::backward_pass;

    let mut r = rng(seed);
    let mut model = NetworkModel::<f64>::init(tiny_arch(), seed).unwrap();
    for p in model.parameters_mut() {
        for v in p.iter_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    let shape = model.arch.input_shape(4);
    let x = Tensor4::new(shape, (0..shape.len()).map(|_| r.random_range(-2.0..2.0)).collect()).unwrap();
    let labels = vec![0, 1, 2, 1];
    let (_, grads) = backward_pass(&model, &x, &labels).unwrap();
    let loss = |m: &NetworkModel<f64>| {
        let cache = m.forward_cached(&x).unwrap();
        oracles::cross_entropy(&cache.output().logits, &labels)
    };
    let names = model.parameter_names();
    let mut out = Vec::new();
    for (i, name) in names.into_iter().enumerate() {
        let n = grads.0[i].len();
        let mut diff = 0.0;
        let mut na = 0.0;
        let mut nn = 0.0;
        for j in 0..n {
            let orig = model.parameters()[i][j];
            model.parameters_mut()[i][j] = orig + h;
            let up = loss(&model);
            model.parameters_mut()[i][j] = orig - h;
            let down = loss(&model);
            model.parameters_mut()[i][j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.0[i][j];
            diff += (analytic - numeric).powi(2);
            na += analytic * analytic;
            nn += numeric * numeric;
        }
        // conv biases feeding batch-statistics BN have an exactly zero
        // gradient; the floor keeps their ratio meaningful
        let scale = na.sqrt().max(nn.sqrt()).max(1e-6);
        out.push((name, diff.sqrt() / scale));
    }
    out
}
