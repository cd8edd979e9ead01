//! Rayon pool against a single worker on the data-parallel hot paths.
//!
//! `cargo bench -p pengcde --no-default-features` runs the same groups on
//! the sequential build.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use pengcde::dynamics::{Task, TaskConfig};
use pengcde::experiment::generate_bundle;
use pengcde::graphgen::{GraphFamily, SeriesConfig};
use pengcde::neuralcde::{ModelConfig, ModelParams, SolverConfig, Variant};
use pengcde::trainer::{batch_gradient, Normalization, Prepared, TrainConfig};

fn heat(n: usize) -> TaskConfig {
    TaskConfig {
        task: Task::Heat,
        series: SeriesConfig {
            graph: GraphFamily::Community.defaults(n),
            num_nodes: n,
            num_times: 24,
            num_changes: 3,
            ..SeriesConfig::desk(GraphFamily::Community)
        },
        regime: None,
    }
}

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let all = rayon::current_num_threads();
    vec![
        ("1-thread".to_string(), rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        (format!("pool-{all}"), rayon::ThreadPoolBuilder::new().num_threads(all).build().unwrap()),
    ]
}

fn generation(c: &mut Criterion) {
    let task = heat(50);
    let mut group = c.benchmark_group("generate_bundle");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| generate_bundle(&task, 0, 4).unwrap()))
        });
    }
    group.finish();
}

fn gradients(c: &mut Criterion) {
    let task = heat(32);
    let bundle = generate_bundle(&task, 0, 4).unwrap();
    let norm = Normalization::fit(&bundle.train).unwrap();
    let mut group = c.benchmark_group("batch_gradient");
    group.sample_size(10);
    for variant in [Variant::Peng, Variant::PreMult] {
        let set: Vec<Prepared> = bundle.train.iter().map(|s| Prepared::new(s, variant, Some(&norm)).unwrap()).collect();
        let params = ModelParams::init(ModelConfig::new(variant, 32, 1, 1), 0).unwrap();
        let cfg = TrainConfig {
            solver: SolverConfig::Rk4Knots { substeps: 1 },
            ..TrainConfig::desk()
        };
        for (name, pool) in pools() {
            group.bench_function(BenchmarkId::new(variant.name(), &name), |b| {
                b.iter(|| pool.install(|| batch_gradient(&params, &set, &cfg).unwrap()))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, generation, gradients);
criterion_main!(benches);
