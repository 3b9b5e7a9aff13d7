mod common;

use common::{small_arch, small_corpus};
use oftta::data::{standardize, AxisStats, DomainDataset};
use oftta::engine::{run_ctta, run_looa, run_stream, stream_order, AdaptationConfig, Adapter, ProtocolResult, StreamResult, TtaMethod};
use oftta::metrics::{argmax, benchmark};
use oftta::nn::NetworkModel;
use oftta::normalization::NormStrategy;
use oftta::prototype::{adapt_batch_scored, init_support, Capacity, PseudoLabelSource};
use proptest::prelude::*;

const ALL: [TtaMethod; 5] = [TtaMethod::Erm, TtaMethod::Bn, TtaMethod::T3a, TtaMethod::AlphaBn { alpha: 0.5 }, TtaMethod::Oftta];

/// Untrained model with source statistics fitted on `sources`.
fn model_for(sources: &[&DomainDataset], seed: u64) -> NetworkModel<f32> {
    let mut m = NetworkModel::<f32>::init(small_arch(), seed).unwrap();
    m.input_norm = Some(AxisStats::fit(sources).unwrap());
    m
}

fn config(method: TtaMethod, batch_size: usize) -> AdaptationConfig {
    AdaptationConfig {
        batch_size,
        ..AdaptationConfig::new(method)
    }
}

/// Wall-clock fields are the only non-deterministic part of a result.
fn untimed(mut r: StreamResult) -> StreamResult {
    for rec in &mut r.records {
        rec.ms = 0.0;
    }
    r.summary.mean_batch_ms = 0.0;
    r.summary.std_batch_ms = 0.0;
    r
}

fn untimed_protocol(mut p: ProtocolResult) -> ProtocolResult {
    for run in &mut p.runs {
        run.domains = run.domains.drain(..).map(untimed).collect();
    }
    p
}

/// Predictions indexed by sample position in the domain.
fn by_sample(r: &StreamResult, n: usize, seed: u64) -> Vec<usize> {
    let mut out = vec![usize::MAX; n];
    for (&i, p) in stream_order(n, seed).iter().zip(r.predictions()) {
        out[i] = p;
    }
    out
}

#[test]
fn erm_matches_plain_forward_for_any_seed() {
    let d = small_corpus(1);
    let m = model_for(&[&d[0]], 3);
    let n = d[1].len();
    let x = standardize(&d[1], m.input_norm.as_ref().unwrap()).unwrap();
    let all: Vec<usize> = (0..n).collect();
    let out = m.forward(&x.batch(&all), &NormStrategy::Cbn).unwrap();
    let plain: Vec<usize> = out.logits.iter_rows().map(argmax).collect();
    for seed in [1, 2, 3] {
        let cfg = AdaptationConfig { seed, ..config(TtaMethod::Erm, 10) };
        let r = run_stream(&m, &d[1], &cfg).unwrap();
        assert_eq!(by_sample(&r, n, seed), plain);
    }
}

#[test]
fn single_batch_oftta_is_one_adjustment_step() {
    let d = small_corpus(2);
    let m = model_for(&[&d[0]], 5);
    let cfg = config(TtaMethod::Oftta, 1000);
    let r = run_stream(&m, &d[2], &cfg).unwrap();
    assert_eq!(r.records.len(), 1);

    let x = standardize(&d[2], m.input_norm.as_ref().unwrap()).unwrap();
    let order = stream_order(d[2].len(), cfg.seed);
    let schedule = cfg.schedule(m.num_bn_layers()).unwrap();
    let out = m.forward_with_schedule(&x.batch(&order), &schedule).unwrap();
    let mut set = init_support(&m.head).unwrap();
    let adj = adapt_batch_scored(&mut set, &out.features, &out.logits, cfg.capacity).unwrap();
    assert_eq!(r.records[0].predictions, adj.labels);
    assert_eq!(r.records[0].entropies, adj.output_entropies);
}

#[test]
fn runs_are_deterministic_and_account_for_every_sample() {
    let d = small_corpus(3);
    let m = model_for(&[&d[0]], 7);
    for method in ALL {
        let cfg = config(method, 7);
        let a = untimed(run_stream(&m, &d[1], &cfg).unwrap());
        let b = untimed(run_stream(&m, &d[1], &cfg).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.summary.samples, d[1].len());
        assert_eq!(a.records.len(), d[1].len().div_ceil(7));
        // the trailing short batch is kept
        assert_eq!(a.records.last().unwrap().predictions.len(), d[1].len() % 7);
        let mut seen: Vec<usize> = stream_order(d[1].len(), cfg.seed);
        seen.sort_unstable();
        assert_eq!(seen, (0..d[1].len()).collect::<Vec<_>>());
    }
}

#[test]
fn adaptation_never_mutates_the_model() {
    let d = small_corpus(4);
    let m = model_for(&[&d[0]], 9);
    let digest = m.param_digest();
    let source = standardize(&d[0], m.input_norm.as_ref().unwrap()).unwrap();
    let all: Vec<usize> = (0..source.len()).collect();
    let before = m.forward(&source.batch(&all), &NormStrategy::Cbn).unwrap();
    for method in ALL {
        run_stream(&m, &d[1], &config(method, 4)).unwrap();
        assert_eq!(m.param_digest(), digest, "{method}");
    }
    let after = m.forward(&source.batch(&all), &NormStrategy::Cbn).unwrap();
    assert_eq!(before, after);
}

#[test]
fn looa_decomposes_into_streams() {
    let d = small_corpus(5);
    let models: Vec<_> = (0..d.len())
        .map(|i| {
            let src: Vec<&DomainDataset> = d.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, x)| x).collect();
            model_for(&src, i as u64)
        })
        .collect();
    let cfg = config(TtaMethod::Oftta, 16);
    let seeds = [1, 2];
    let p = untimed_protocol(run_looa(&models, &d, &cfg, &seeds).unwrap());
    assert_eq!(p.runs.len(), 2);
    for (run, &seed) in p.runs.iter().zip(&seeds) {
        for (i, r) in run.domains.iter().enumerate() {
            let solo = untimed(run_stream(&models[i], &d[i], &AdaptationConfig { seed, ..cfg.clone() }).unwrap());
            assert_eq!(r, &solo);
        }
    }
    assert!(run_looa(&models[..2], &d, &cfg, &seeds).is_err());
    assert!(run_looa(&models, &d, &cfg, &[]).is_err());
}

#[test]
fn identical_domains_score_identically() {
    let d = small_corpus(6);
    let m = model_for(&[&d[0]], 1);
    let twins = vec![d[1].clone(), d[1].clone()];
    let p = run_looa(&[m.clone(), m], &twins, &config(TtaMethod::Oftta, 8), &[1]).unwrap();
    assert_eq!(p.runs[0].domains[0].summary.accuracy, p.runs[0].domains[1].summary.accuracy);
}

#[test]
fn ctta_degenerate_sequence_and_growth() {
    let d = small_corpus(7);
    let m = model_for(&[&d[0]], 2);
    let cfg = AdaptationConfig {
        capacity: Capacity::Unbounded,
        seed: 1,
        ..config(TtaMethod::Oftta, 8)
    };
    let one = untimed_protocol(run_ctta(&m, "0", &d[1..2], &cfg, &[1]).unwrap());
    assert_eq!(one.runs[0].domains[0], untimed(run_stream(&m, &d[1], &cfg).unwrap()));

    let seq = run_ctta(&m, "0", &d[1..], &cfg, &[1]).unwrap();
    let sizes: Vec<usize> = seq.runs[0].domains.iter().map(|r| r.support_sizes.as_ref().unwrap().iter().sum()).collect();
    assert!(sizes.windows(2).all(|w| w[1] >= w[0]), "{sizes:?}");

    let reset = run_ctta(&m, "0", &d[1..], &AdaptationConfig { ctta_reset: true, ..cfg.clone() }, &[1]).unwrap();
    for (r, target) in reset.runs[0].domains.iter().zip(&d[1..]) {
        assert_eq!(untimed(r.clone()), untimed(run_stream(&m, target, &cfg).unwrap()));
    }
    assert!(run_ctta(&m, "0", &d, &cfg, &[1]).is_err());
}

#[test]
fn oftta_with_cbn_everywhere_and_no_filtering_is_t3a() {
    let d = small_corpus(8);
    let m = model_for(&[&d[0]], 4);
    for source in [PseudoLabelSource::LinearHead, PseudoLabelSource::Prototypes] {
        let base = AdaptationConfig {
            capacity: Capacity::Unbounded,
            edtn_bottom: 1.0,
            edtn_top: 1.0,
            pseudo_labels: source,
            ..config(TtaMethod::Oftta, 8)
        };
        let oftta = untimed(run_stream(&m, &d[2], &base).unwrap());
        let t3a = untimed(run_stream(&m, &d[2], &base.with_method(TtaMethod::T3a)).unwrap());
        assert_eq!(oftta, t3a);
    }
}

#[test]
fn alpha_endpoints_are_erm_and_bn() {
    let d = small_corpus(9);
    let m = model_for(&[&d[0]], 6);
    let run = |method| untimed(run_stream(&m, &d[1], &config(method, 8)).unwrap());
    assert_eq!(run(TtaMethod::AlphaBn { alpha: 1.0 }).predictions(), run(TtaMethod::Erm).predictions());
    assert_eq!(run(TtaMethod::AlphaBn { alpha: 0.0 }).predictions(), run(TtaMethod::Bn).predictions());
}

#[test]
fn single_instance_path() {
    let d = small_corpus(10);
    let m = model_for(&[&d[0]], 8);
    let w = d[1].batch(&[3]);
    let mut erm = Adapter::new(&m, &config(TtaMethod::Erm, 1)).unwrap();
    let first = erm.adapt_single_instance(&w).unwrap();
    for _ in 0..5 {
        assert_eq!(erm.adapt_single_instance(&w).unwrap(), first);
    }
    let mut batched = Adapter::new(&m, &config(TtaMethod::Erm, 4)).unwrap();
    assert!(batched.adapt_single_instance(&w).is_err());
    let mut oftta = Adapter::new(&m, &config(TtaMethod::Oftta, 1)).unwrap();
    assert!(oftta.schedule().alphas().iter().all(|&a| a >= 0.6));
    oftta.adapt_single_instance(&w).unwrap();
    assert_eq!(oftta.support().unwrap().total_entries(), m.num_classes() + 1);
}

#[test]
fn benchmark_bookkeeping() {
    let d = small_corpus(11);
    let m = model_for(&[&d[0]], 1);
    let methods = [TtaMethod::Erm, TtaMethod::T3a, TtaMethod::Oftta];
    let cfg = config(TtaMethod::Erm, 16);
    let r = benchmark(&methods, &m, &d[1], &cfg, 3).unwrap();
    assert_eq!(r.methods.len(), 3);
    for (t, &method) in r.methods.iter().zip(&methods) {
        assert_eq!(t.method, method);
        assert_eq!(t.runs, 3);
        assert!(t.mean_ms > 0.0 && t.std_ms >= 0.0);
    }
    assert_eq!(r.timing(TtaMethod::Erm).unwrap().support_bytes, 0);
    assert!(r.timing(TtaMethod::Oftta).unwrap().support_bytes > 0);
    assert_eq!(r.batches_timed, d[1].len().div_ceil(16) - 1);
    assert!(benchmark(&methods, &m, &d[1], &cfg, 2).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn prediction_count_reconciles(seed in 0u64..100, batch in 1usize..60, method in 0usize..5) {
        let d = small_corpus(12);
        let m = model_for(&[&d[0]], 1);
        let cfg = AdaptationConfig { seed, ..config(ALL[method], batch) };
        let r = run_stream(&m, &d[3], &cfg).unwrap();
        prop_assert_eq!(r.predictions().len(), d[3].len());
        prop_assert_eq!(r.confusion.total() as usize, d[3].len());
        prop_assert!(r.records.iter().all(|b| b.entropies.iter().all(|e| e.is_finite() && *e >= 0.0)));
    }
}
