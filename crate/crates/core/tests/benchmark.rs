mod common;

use common::*;
use proptest::prelude::*;
use varnet::benchmark::*;
use varnet::exec::Execution;
use varnet::gp::GpPosterior;
use varnet::models::{MethodConfig, PredictiveSummary};
use varnet::tensor::{RngStream, Tensor};
use varnet::Error;

const SEQ: Execution = Execution::Sequential;

#[test]
fn kl_matches_quadrature() {
    let mut r = rng(70);
    for _ in 0..100 {
        let (m1, m2) = (r_range(&mut r, -3.0, 3.0), r_range(&mut r, -3.0, 3.0));
        let (v1, v2) = (r_range(&mut r, 0.05, 4.0), r_range(&mut r, 0.05, 4.0));
        let got = kl_univariate_gaussian(m1, v1, m2, v2).unwrap();
        let want = kl_by_quadrature(m1, v1, m2, v2);
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

fn r_range(r: &mut impl rand::Rng, lo: f64, hi: f64) -> f64 {
    r.random_range(lo..hi)
}

#[test]
fn kl_reference_values() {
    assert_eq!(kl_univariate_gaussian(0.3, 2.0, 0.3, 2.0).unwrap(), 0.0);
    // 0.5 (ln 1/4 + 4 - 1)
    let want = 0.5 * (0.25f64.ln() + 3.0);
    assert!((kl_univariate_gaussian(0.0, 4.0, 0.0, 1.0).unwrap() - want).abs() < 1e-12);
    assert!((want - 0.80685).abs() < 1e-5);
    assert!(matches!(kl_univariate_gaussian(0.0, 0.0, 0.0, 1.0), Err(Error::Domain(_))));
    assert!(matches!(kl_univariate_gaussian(0.0, 1.0, 0.0, -1.0), Err(Error::Domain(_))));
}

/// Predicts fixed moments regardless of the input.
struct Stub {
    mean: Vec<f64>,
    variance: Vec<f64>,
}

impl Predictor for Stub {
    fn predictive_moments(&self, x: &Tensor, samples: usize, _: &RngStream, _: Execution) -> varnet::Result<PredictiveSummary> {
        let n = x.rows();
        Ok(PredictiveSummary {
            mean: Tensor::new(vec![n, 1], self.mean.clone())?,
            variance: Tensor::new(vec![n, 1], self.variance.clone())?,
            sample_count: samples,
        })
    }
}

fn small_cell() -> BenchConfig {
    BenchConfig { n_test: 20, ..BenchConfig::desk_cell(3, 4, 0.1) }
}

fn oracle_and_inputs(cfg: &BenchConfig, seed: u64) -> (GpPosterior, Tensor) {
    let data = generate_regression_dataset(cfg, seed).unwrap();
    (oracle_posterior(cfg, &data).unwrap(), matrix_to_tensor(&data.x_test).unwrap())
}

fn id() -> RunId {
    RunId { config_id: "stub".into(), method: "stub".into(), seed: 0 }
}

fn score(p: &dyn Predictor, oracle: &GpPosterior, x: &Tensor) -> KLResult {
    evaluate_uncertainty_quality(p, oracle, x, 1, &RngStream::new(0), SEQ, id()).unwrap()
}

#[test]
fn oracle_as_model_scores_zero() {
    let cfg = small_cell();
    let (oracle, x) = oracle_and_inputs(&cfg, 1);
    let stub = Stub { mean: oracle.mean.iter().copied().collect(), variance: oracle.variances() };
    let r = score(&stub, &oracle, &x);
    assert!(r.mean_kl <= 1e-10, "{}", r.mean_kl);
    assert_eq!(r.per_point_kl.len(), 20);
}

#[test]
fn shifted_means_cost_half_the_squared_offset() {
    let cfg = small_cell();
    let (oracle, x) = oracle_and_inputs(&cfg, 2);
    let delta = 0.3;
    let stub = Stub { mean: oracle.mean.iter().map(|m| m + delta).collect(), variance: oracle.variances() };
    let r = score(&stub, &oracle, &x);
    for (i, kl) in r.per_point_kl.iter().enumerate() {
        let v = oracle.covariance[(i, i)].max(0.0) + 0.01;
        assert!((kl - delta * delta / (2.0 * v)).abs() < 1e-10);
    }
}

#[test]
fn per_point_scores_match_quadrature_with_noise_and_floor() {
    let cfg = small_cell();
    let (oracle, x) = oracle_and_inputs(&cfg, 3);
    let mut r = rng(71);
    let mean: Vec<f64> = (0..20).map(|_| r_range(&mut r, -2.0, 2.0)).collect();
    // a few collapsed variances exercise the floor
    let variance: Vec<f64> = (0..20).map(|i| if i % 5 == 0 { 0.0 } else { r_range(&mut r, 0.0, 2.0) }).collect();
    let res = score(&Stub { mean: mean.clone(), variance: variance.clone() }, &oracle, &x);
    let eps2 = 0.01;
    for i in 0..20 {
        let want = kl_by_quadrature(oracle.mean[i], oracle.covariance[(i, i)] + eps2, mean[i], variance[i].max(1e-8) + eps2);
        assert!((res.per_point_kl[i] - want).abs() < 1e-6, "point {i}");
    }
    let avg = res.per_point_kl.iter().sum::<f64>() / 20.0;
    assert!((res.mean_kl - avg).abs() < 1e-15);
}

#[test]
fn mismatched_predictions_are_rejected() {
    let cfg = small_cell();
    let (oracle, x) = oracle_and_inputs(&cfg, 4);
    let short = x.select_rows(&[0, 1]).unwrap();
    let stub = Stub { mean: vec![0.0; 2], variance: vec![1.0; 2] };
    let err = evaluate_uncertainty_quality(&stub, &oracle, &short, 1, &RngStream::new(0), SEQ, id());
    assert!(matches!(err, Err(Error::Usage(_))));
}

#[test]
fn datasets_have_the_configured_sizes() {
    for (d, lambda) in [(1, 1), (2, 10), (5, 3)] {
        let cfg = BenchConfig { n_test: 7, ..BenchConfig::desk_cell(d, lambda, 0.1) };
        let data = generate_regression_dataset(&cfg, 5).unwrap();
        assert_eq!((data.x_train.nrows(), data.x_train.ncols()), (d * lambda, d));
        assert_eq!(data.y_train.len(), d * lambda);
        assert_eq!((data.x_test.nrows(), data.f_test.len()), (7, 7));
        assert_eq!(data, generate_regression_dataset(&cfg, 5).unwrap());
        assert_ne!(data.y_train, generate_regression_dataset(&cfg, 6).unwrap().y_train);
    }
}

#[test]
fn oracle_conditions_on_the_observation_noise() {
    let cfg = BenchConfig { n_test: 3, ..BenchConfig::desk_cell(2, 5, 0.5) };
    let data = generate_regression_dataset(&cfg, 7).unwrap();
    let oracle = oracle_posterior(&cfg, &data).unwrap();
    assert!((oracle.noise_variance - 0.25).abs() < 1e-15);
    let rows = |m: &nalgebra::DMatrix<f64>| -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
    };
    let (mean, cov) = naive_gp_posterior(&rows(&data.x_train), &data.y_train, &rows(&data.x_test), 0.25, 2, 2.0, 0.1);
    assert!(max_abs_diff(oracle.mean.as_slice(), &mean) < 1e-8);
    assert!((0..3).all(|i| (oracle.covariance[(i, i)] - cov[i][i]).abs() < 1e-8));
}

fn tiny_cell(d: usize, lambda: usize) -> BenchConfig {
    let mut c = BenchConfig::desk_cell(d, lambda, 0.1);
    c.n_test = 10;
    c.seeds = vec![11, 12];
    c.predictive_samples = 5;
    c.methods = vec![MethodConfig::MCD, MethodConfig::ensemble(2)];
    c.training.hidden = vec![8];
    c.training.steps = 20;
    c
}

#[test]
fn suite_runs_every_combination() {
    let cells = [tiny_cell(2, 3), tiny_cell(3, 2)];
    let res = run_benchmark_suite(&cells, SEQ).unwrap();
    assert!(res.failures.is_empty(), "{:?}", res.failures);
    assert_eq!(res.runs.len(), 8);
    assert_eq!(res.aggregates.len(), 4);
    assert!(res.aggregates.iter().all(|a| a.seeds == 2 && a.mean_kl.is_finite() && a.std_kl >= 0.0));
    let csv = res.to_csv();
    assert_eq!(csv.lines().next().unwrap(), CSV_HEADER);
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(res.to_jsonl().lines().count(), 8);
    for a in &res.aggregates {
        let kls: Vec<f64> = res.runs.iter().filter(|r| r.id.config_id == a.config_id && r.id.method == a.method).map(|r| r.mean_kl).collect();
        let (m, v) = mean_var(&kls);
        assert!((a.mean_kl - m).abs() < 1e-12 && (a.std_kl - v.sqrt()).abs() < 1e-12);
    }
}

#[test]
fn results_do_not_depend_on_cell_order_or_execution() {
    let forward = run_benchmark_suite(&[tiny_cell(2, 3), tiny_cell(3, 2)], SEQ).unwrap();
    let reversed = run_benchmark_suite(&[tiny_cell(3, 2), tiny_cell(2, 3)], Execution::default()).unwrap();
    let key = |r: &KLResult| (r.id.config_id.clone(), r.id.method.clone(), r.id.seed);
    let mut a = forward.runs.clone();
    let mut b = reversed.runs.clone();
    a.sort_by_key(key);
    b.sort_by_key(key);
    assert_eq!(a, b);
}

#[test]
fn invalid_cells_are_configuration_errors() {
    let mut c = tiny_cell(2, 2);
    c.noise_std = 0.0;
    assert!(matches!(run_benchmark_suite(&[c], SEQ), Err(Error::Config(_))));
    let c = tiny_cell(2, 2);
    assert!(matches!(run_benchmark_suite(&[c.clone(), c], SEQ), Err(Error::Config(_))));
}

#[test]
fn charts_are_written_per_configuration() {
    let res = run_benchmark_suite(&[tiny_cell(2, 3)], SEQ).unwrap();
    let charts = svg::charts_by_config(&res.aggregates);
    assert_eq!(charts.len(), 1);
    assert!(charts[0].1.starts_with("<svg") && charts[0].1.contains("ensemble-2"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inflating_the_model_variance_increases_kl(m in -2.0f64..2.0, v in 0.1f64..3.0, k in 1.05f64..20.0) {
        let base = kl_univariate_gaussian(m, v, m, v * k).unwrap();
        let more = kl_univariate_gaussian(m, v, m, v * k * 1.5).unwrap();
        prop_assert!(base > 0.0 && more > base);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_only_at_equality(m1 in -3.0f64..3.0, v1 in 0.01f64..5.0, m2 in -3.0f64..3.0, v2 in 0.01f64..5.0) {
        let kl = kl_univariate_gaussian(m1, v1, m2, v2).unwrap();
        prop_assert!(kl >= -1e-15);
        prop_assert!(kl_univariate_gaussian(m1, v1, m1, v1).unwrap().abs() < 1e-15);
    }
}
