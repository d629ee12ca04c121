//! Sequential against parallel execution of the data-parallel loops.
//!
//! `cargo bench -p lbm-core --bench parallel`

use std::hint::black_box;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lbm_core::bkt::{fit_em_with, sample_sequences, BktParams};
use lbm_core::gateway::OracleBackend;
use lbm_core::grpo::{monte_carlo_gradient, ToyPolicy};
use lbm_core::harness::{run_with, Encoder, ExperimentConfig};
use lbm_core::par::Execution;
use lbm_core::sim::{generate_dataset_with, SimConfig};
use rand::SeedableRng;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn datagen(c: &mut Criterion) {
    let cfg = SimConfig {
        n_students: 500,
        ..SimConfig::default()
    };
    let mut g = c.benchmark_group("datagen_500_students");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_dataset_with(black_box(&cfg), exec).unwrap())
        });
    }
    g.finish();
}

fn monte_carlo(c: &mut Criterion) {
    let policy = ToyPolicy::uniform(4);
    let rewards = [1.0, 0.5, 0.25, 0.0];
    let mut g = c.benchmark_group("grpo_monte_carlo_50k_groups");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| monte_carlo_gradient(&policy, black_box(&rewards), 5, 50_000, 0.04, 1, exec).unwrap())
        });
    }
    g.finish();
}

fn bkt_em(c: &mut Criterion) {
    let truth = BktParams {
        p_init: 0.3,
        ..BktParams::default()
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let data = sample_sequences(&truth, 2000, 50, &mut rng);
    let mut g = c.benchmark_group("bkt_em_10_iterations");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| fit_em_with(black_box(&data), BktParams::default(), 10, 0.0, exec).unwrap())
        });
    }
    g.finish();
}

fn oracle_experiment(c: &mut Criterion) {
    let dataset = generate_dataset_with(
        &SimConfig {
            n_students: 200,
            ..SimConfig::default()
        },
        Execution::Parallel,
    )
    .unwrap();
    let encoder = Encoder::Backend(Arc::new(OracleBackend));
    let mut g = c.benchmark_group("oracle_experiment_200_students");
    g.sample_size(10);
    for (name, exec) in MODES {
        let cfg = ExperimentConfig {
            execution: exec,
            ..ExperimentConfig::default()
        };
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| run_with(&cfg, black_box(&dataset), &encoder, &OracleBackend).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, datagen, monte_carlo, bkt_em, oracle_experiment);
criterion_main!(benches);
