use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use progest::estimators::EstimatorId;
use progest::eval::ErrorOptions;
use progest::features::{FeatureConfig, FeatureSchema};
use progest::par::Exec;
use progest::selection::build_training_set;
use progest::selection::mart::{train_mart, Dataset, MartParams};
use progest::sim::{execute_all, generate_workload, Trace, WorkloadConfig};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn workload() -> Vec<progest::sim::QuerySpec> {
    let mut cfg = WorkloadConfig::new("bench");
    cfg.seed = 1;
    cfg.query_count = 24;
    cfg.skew_z = 1.0;
    cfg.estimate_error_sigma = 0.5;
    generate_workload(&cfg).unwrap()
}

fn traces() -> Vec<Trace> {
    execute_all(&workload(), None, Exec::default())
        .into_iter()
        .map(Result::unwrap)
        .collect()
}

fn simulate(c: &mut Criterion) {
    let specs = workload();
    let mut g = c.benchmark_group("simulate");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| execute_all(&specs, None, exec))
        });
    }
    g.finish();
}

fn features(c: &mut Criterion) {
    let traces = traces();
    let schema = FeatureSchema::new(FeatureConfig::default());
    let candidates = EstimatorId::CANDIDATES.to_vec();
    let opts = ErrorOptions::default();
    let mut g = c.benchmark_group("training_set");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| build_training_set(&traces, &candidates, &schema, &opts, exec).unwrap())
        });
    }
    g.finish();
}

fn boosting(c: &mut Criterion) {
    let traces = traces();
    let schema = FeatureSchema::new(FeatureConfig::default());
    let examples = build_training_set(
        &traces,
        &[EstimatorId::Tgn],
        &schema,
        &ErrorOptions::default(),
        Exec::default(),
    )
    .unwrap();
    let rows: Vec<&[f64]> = examples.iter().map(|e| e.features.values.as_slice()).collect();
    let labels: Vec<f64> = examples.iter().map(|e| e.labels[0].unwrap_or(0.0)).collect();
    let params = MartParams {
        iterations: 20,
        ..MartParams::default()
    };
    let mut g = c.benchmark_group("mart");
    g.sample_size(10);
    for (name, exec) in MODES {
        let data = Dataset::with_exec(&rows, exec).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| train_mart(&data, &labels, &params, "bench", exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, simulate, features, boosting);
criterion_main!(benches);
