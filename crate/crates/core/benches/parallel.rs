//! Sequential vs rayon fan-out on the three places work is split: Monte Carlo
//! passes of a predictive estimate, wide-network sampling and benchmark runs.
//!
//! On a single core the two should be within noise of each other; the
//! interesting number is the speedup on a multi-core machine.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use varnet::benchmark::{run_benchmark_suite, BenchConfig};
use varnet::exec::Execution;
use varnet::gp::{wide_network_covariance, NngpConfig};
use varnet::models::{Architecture, MethodConfig, Model};
use varnet::tensor::{sample_standard_normal, RngStream};

#[cfg(feature = "parallel")]
const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];
#[cfg(not(feature = "parallel"))]
const MODES: [(&str, Execution); 1] = [("sequential", Execution::Sequential)];

fn predictive_moments(c: &mut Criterion) {
    let arch = Architecture::regression_mlp(10, &[50, 50]);
    let model = Model::new(arch, MethodConfig::VNN, &RngStream::new(0)).unwrap();
    let x = sample_standard_normal(&[100, 10], &RngStream::new(1));
    let mut g = c.benchmark_group("predictive_moments");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new(name, "vnn-100x100"), |b| {
            b.iter(|| model.predictive_moments(&x, 100, &RngStream::new(2), exec).unwrap())
        });
    }
    g.finish();
}

fn wide_networks(c: &mut Criterion) {
    let cfg = NngpConfig::with_input_dim(4);
    let (a, b) = ([0.3, -1.0, 0.5, 2.0], [1.1, 0.2, -0.7, 0.4]);
    let mut g = c.benchmark_group("wide_network_covariance");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new(name, "width2048-nets500"), |bench| {
            bench.iter(|| wide_network_covariance(&a, &b, &cfg, 2048, 500, &RngStream::new(3), exec).unwrap())
        });
    }
    g.finish();
}

fn small_suite(c: &mut Criterion) {
    let mut cell = BenchConfig::desk_cell(3, 5, 0.1);
    cell.n_test = 20;
    cell.seeds = vec![0, 1];
    cell.predictive_samples = 10;
    cell.methods = vec![MethodConfig::VNN, MethodConfig::MCD, MethodConfig::ensemble(3)];
    cell.training.hidden = vec![16];
    cell.training.steps = 100;
    let mut g = c.benchmark_group("benchmark_suite");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::new(name, "6-runs"), |b| {
            b.iter(|| run_benchmark_suite(std::slice::from_ref(&cell), exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, predictive_moments, wide_networks, small_suite);
criterion_main!(benches);
