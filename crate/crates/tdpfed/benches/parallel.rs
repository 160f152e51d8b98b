//! Compares sequential and rayon client-update execution on a small
//! federated round.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use tdpfed::layers::dnn_model_spec;
use tdpfed::simulator::{
    run, AggregationStrategy, DataConfig, Parallelism, SimConfig,
};

fn config(parallelism: Parallelism) -> SimConfig {
    SimConfig {
        model: dnn_model_spec(2.0),
        data: DataConfig::Synthetic {
            classes: 10,
            dim: 784,
            n_per_class: 80,
            n_test_per_class: 10,
            separation: 3.0,
        },
        classes_per_client: 2,
        clients: 20,
        sampled: 20,
        rounds: 1,
        tau: 2,
        batch_size: 20,
        lambda: 12.0,
        beta: 1.0,
        eta: 8e-4,
        eta_p: 0.08,
        s: 3,
        s_prime: 3,
        strategy: AggregationStrategy::Afm,
        seed: 42,
        eval_cadence: 1,
        train_only_sampled: false,
        als_iters: 25,
        parallelism,
    }
}

fn bench_round(c: &mut Criterion) {
    let mut group = c.benchmark_group("federated_round");
    group.sample_size(10);
    group.bench_function("sequential", |b| {
        let cfg = config(Parallelism::Sequential);
        b.iter(|| black_box(run(&cfg).unwrap().metrics));
    });
    group.bench_function("rayon_auto", |b| {
        let cfg = config(Parallelism::Rayon { threads: 0 });
        b.iter(|| black_box(run(&cfg).unwrap().metrics));
    });
    group.finish();
}

criterion_group!(benches, bench_round);
criterion_main!(benches);
