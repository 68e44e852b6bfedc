//! Benchmarks for the four hot paths of the pipeline: the forward pass
//! (capture and interventions), linear CKA (similarity analysis), the paired
//! bootstrap (every experiment's significance machinery), and the
//! attention-coverage statistic. Sizes match the default configuration's
//! heaviest cell (N = 16) exactly.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::Rng;

use echoprobe_core::attnstats::{cov90, turn_masses};
use echoprobe_core::cka::linear_cka;
use echoprobe_core::corpus::{sequence_len, CorpusConfig, Role, TurnSpan};
use echoprobe_core::metrics::paired_bootstrap;
use echoprobe_core::model::{ForwardOptions, Model, ModelConfig};
use echoprobe_core::rng;

const N_TURNS: usize = 16;

/// Token count of the default corpus's longest trials.
fn default_seq_len() -> usize {
    sequence_len(&CorpusConfig::default(), N_TURNS)
}

fn bench_forward(c: &mut Criterion) {
    let cfg = ModelConfig::default();
    let seq = default_seq_len();
    assert!(seq <= cfg.max_seq_len);
    let model = Model::init(cfg.clone()).expect("init model");
    let mut r = rng::stream(1, "bench.forward", &[]);
    let tokens: Vec<u32> = (0..seq).map(|_| r.gen_range(0..cfg.vocab_size as u32)).collect();
    let options = [1u32, 2, 3, 4];

    let mut g = c.benchmark_group("forward");
    g.bench_function(format!("plain_{seq}"), |b| {
        b.iter(|| {
            model
                .forward(&tokens, &options, &ForwardOptions::default())
                .expect("forward")
                .predicted_option
        })
    });
    g.bench_function(format!("capture_{seq}"), |b| {
        b.iter(|| {
            model
                .forward(&tokens, &options, &ForwardOptions::capture())
                .expect("forward")
                .hidden
                .len()
        })
    });
    g.finish();
}

fn bench_linear_cka(c: &mut Criterion) {
    // 160 class-matched pairs of 64-dim states: the size of one cross-layer
    // matrix entry's input in the similarity analysis.
    let n = 160;
    let d = ModelConfig::default().width;
    let mut r = rng::stream(2, "bench.cka", &[]);
    let x: Vec<f64> = (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..n * d).map(|_| r.gen_range(-1.0..1.0)).collect();
    c.bench_function("linear_cka_160x64", |b| {
        b.iter(|| linear_cka(&x, &y, n, d, d).expect("cka"))
    });
}

fn bench_bootstrap(c: &mut Criterion) {
    // 80 paired binary outcomes, B = 2000: one intervention comparison.
    let mut r = rng::stream(3, "bench.bootstrap", &[]);
    let a: Vec<f64> = (0..80).map(|_| f64::from(r.gen_range(0..2u32))).collect();
    let b: Vec<f64> = (0..80).map(|_| f64::from(r.gen_range(0..2u32))).collect();
    c.bench_function("paired_bootstrap_n80_b2000", |bch| {
        bch.iter(|| paired_bootstrap(&a, &b, 2000, 9).expect("bootstrap").p_one_sided)
    });
}

fn bench_cov90(c: &mut Criterion) {
    // One N = 16 decoding row: normalized attention mass over 16 turn spans.
    let seq = default_seq_len();
    let mut r = rng::stream(4, "bench.cov90", &[]);
    let mut row: Vec<f32> = (0..seq).map(|_| r.gen_range(0.0f32..1.0)).collect();
    let total: f32 = row.iter().sum();
    for v in row.iter_mut() {
        *v /= total;
    }
    let per = seq / N_TURNS;
    let spans: Vec<TurnSpan> = (0..N_TURNS)
        .map(|i| TurnSpan {
            turn_id: i + 1,
            role: if i % 2 == 0 { Role::User } else { Role::Assistant },
            start: i * per,
            end: if i == N_TURNS - 1 { seq } else { (i + 1) * per },
            is_probe: i == N_TURNS - 1,
        })
        .collect();
    c.bench_function(&format!("turn_masses_cov90_{seq}"), |b| {
        b.iter_batched(
            || row.clone(),
            |row| {
                let masses = turn_masses(&row, &spans);
                cov90(&masses).expect("cov90")
            },
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, bench_forward, bench_linear_cka, bench_bootstrap, bench_cov90);
criterion_main!(benches);
