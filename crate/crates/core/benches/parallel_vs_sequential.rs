//! Compares the rayon pool against a single worker on three workloads.
//! Build with `--no-default-features` to time the sequential fallback; the
//! benchmark ids carry the build mode.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::Rng;

use gradual_core::distributions::WeightedCloud;
use gradual_core::experiment::{run_experiment, DatasetSpec, ExperimentConfig, Method, ModelSpec, SelfTrainSettings};
use gradual_core::models::MarginLossKind;
use gradual_core::optimize::unlabeled_objective;
use gradual_core::shiftgen::GaussianDriftSpec;
use gradual_core::wasserstein::winf_discrete;
use gradual_core::{par, rng};

fn small_experiment() -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec::GaussianDrift(GaussianDriftSpec {
            d: 20,
            n_labeled: 200,
            n_unlabeled_total: 1000,
            n_target_eval: 500,
            seed: 3,
            ..Default::default()
        }),
        model: ModelSpec::default(),
        method: Method::GradualSt,
        selftrain: SelfTrainSettings { window: Some(200), epochs: 5, ..Default::default() },
        seeds: (0..8).collect(),
    }
}

fn winf_pairs() -> Vec<(WeightedCloud, WeightedCloud)> {
    let mut rg = rng::seeded(9);
    let mut cloud = |n: usize| {
        let pts: Vec<Vec<f64>> = (0..n).map(|_| vec![rg.random_range(-1.0..1.0), rg.random_range(-1.0..1.0)]).collect();
        WeightedCloud::uniform(pts)
    };
    (0..64).map(|_| (cloud(40), cloud(40))).collect()
}

fn modes() -> [(&'static str, Option<usize>); 2] {
    [("pool", None), ("one_thread", Some(1))]
}

fn bench(c: &mut Criterion) {
    let build = if par::is_parallel() { "rayon" } else { "sequential_build" };
    let mut g = c.benchmark_group(format!("parallel_vs_sequential/{build}"));
    g.sample_size(10);

    let cfg = small_experiment();
    for (name, threads) in modes() {
        g.bench_function(BenchmarkId::new("experiment_8_seeds", name), |b| {
            b.iter(|| par::with_threads(threads, || black_box(run_experiment(&cfg).unwrap().mean)))
        });
    }

    let pairs = winf_pairs();
    for (name, threads) in modes() {
        g.bench_function(BenchmarkId::new("winf_64_pairs", name), |b| {
            b.iter(|| par::with_threads(threads, || black_box(par::map(&pairs, |(p, q)| winf_discrete(p, q).unwrap()))))
        });
    }

    let mut rg = rng::seeded(4);
    let xs: Vec<Vec<f64>> =
        (0..200_000).map(|_| vec![rg.random_range(-2.0..2.0), rg.random_range(-2.0..2.0)]).collect();
    for (name, threads) in modes() {
        g.bench_function(BenchmarkId::new("unlabeled_objective_200k", name), |b| {
            b.iter(|| {
                par::with_threads(threads, || black_box(unlabeled_objective(MarginLossKind::Ramp, &xs, &[0.6, 0.8])))
            })
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
