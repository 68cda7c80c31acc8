//! End-to-end acceptance checks, run one after another so the timings are
//! not distorted by other tests competing for cores. Prints one PASS/FAIL
//! line per criterion; exits non-zero if a hard criterion fails. The
//! uncertainty-ranking criterion is soft: its verdict is printed but does
//! not fail the run.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use common::*;
use nalgebra::DMatrix;
use rand::Rng;
use varnet::benchmark::*;
use varnet::exec::Execution;
use varnet::gp::checks::wide_network_errors;
use varnet::gp::{gp_posterior, GpPosterior, NngpConfig};
use varnet::layers::*;
use varnet::models::{Architecture, LayerSpec, MethodConfig, Model, PredictiveSummary};
use varnet::tensor::{sample_standard_normal, Activation, RngStream, Tensor};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let mut r = rng(1000);
    let mut worst = [0.0f64; 7];
    for i in 0..100u64 {
        let x = random_tensor(&mut r, &[3, 4]);
        let (w, b) = (random_tensor(&mut r, &[2, 4]), random_tensor(&mut r, &[2]));
        let dense_ps: Vec<Tensor> = (0..4).map(|k| random_tensor(&mut r, if k % 2 == 0 { &[2, 4] } else { &[2] })).collect();
        let img = random_tensor(&mut r, &[2, 2, 5, 5]);
        let conv_ps: Vec<Tensor> = (0..4).map(|k| random_tensor(&mut r, if k % 2 == 0 { &[3, 2, 3, 3] } else { &[3] })).collect();
        let eps_dense = random_tensor(&mut r, &[3, 2]);
        let eps_conv = random_tensor(&mut r, &[2, 3, 3, 3]);
        let (zw, zb) = (random_tensor(&mut r, &[2, 4]), random_tensor(&mut r, &[2]));
        let mask = DropoutConfig::new(0.3).unwrap().scaled_mask(&[3, 4], &mut r);
        let acts = VariationalActivations { mu: Activation::Tanh, sigma: Activation::Softplus, out: Activation::Tanh };
        let conv = LinearOp::Conv { stride: 2, padding: 1 };
        let with_input = |x: &Tensor, ps: &[Tensor]| {
            let mut v = vec![x.clone()];
            v.extend(ps.iter().cloned());
            v
        };

        let errs = [
            gradient_error(&[x.clone(), w.clone(), b.clone()], i, |t, v| t.affine(v[0], v[1], v[2]).unwrap()),
            gradient_error(&[img.clone(), conv_ps[0].clone(), conv_ps[1].clone()], i, |t, v| {
                t.conv2d(v[0], v[1], v[2], 2, 1).unwrap()
            }),
            gradient_error(&with_input(&x, &dense_ps), i, |t, v| {
                variational_on_tape(t, LinearOp::Dense, v[0], [v[1], v[2], v[3], v[4]], acts, &eps_dense).unwrap()
            }),
            gradient_error(&with_input(&img, &conv_ps), i, |t, v| {
                variational_on_tape(t, conv, v[0], [v[1], v[2], v[3], v[4]], acts, &eps_conv).unwrap()
            }),
            gradient_error(&with_input(&x, &dense_ps), i, |t, v| {
                bbb_on_tape(t, LinearOp::Dense, v[0], [v[1], v[2], v[3], v[4]], &zw, &zb).unwrap()
            }),
            gradient_error(&dense_ps, i, |t, v| bbb_kl_on_tape(t, [v[0], v[1], v[2], v[3]], 0.5).unwrap()),
            gradient_error(&[x.clone()], i, |t, v| {
                let h = t.activation(v[0], Activation::Tanh).unwrap();
                t.mul_const(h, &mask).unwrap()
            }),
        ];
        for (w, e) in worst.iter_mut().zip(errs) {
            *w = w.max(e);
        }
    }
    let elapsed = start.elapsed();
    let max = worst.iter().copied().fold(0.0, f64::max);
    verdict(
        max <= 1e-4 && elapsed < Duration::from_secs(120),
        format!(
            "worst relative error {max:.2e} (dense {:.1e}, conv {:.1e}, var-dense {:.1e}, var-conv {:.1e}, bbb {:.1e}, bbb-kl {:.1e}, dropout {:.1e}) in {}",
            worst[0], worst[1], worst[2], worst[3], worst[4], worst[5], worst[6], secs(elapsed)
        ),
    )
}

fn identity_acts() -> VariationalActivations {
    VariationalActivations::epistemic(Activation::Identity)
}

fn dense(r: &mut impl Rng, o: usize, i: usize) -> DenseParams {
    DenseParams::new(random_tensor(r, &[o, i]), random_tensor(r, &[o])).unwrap()
}

fn reparametrization() -> Verdict {
    let mut r = rng(1001);
    let mut exact = 0.0f64;
    for _ in 0..20 {
        let x = random_tensor(&mut r, &[4, 3]);
        let (mu, sigma) = (dense(&mut r, 5, 3), dense(&mut r, 5, 3));
        let eps = random_tensor(&mut r, &[4, 5]);
        let p = VariationalParams::new(mu.clone(), sigma.clone(), identity_acts()).unwrap();
        let got = variational_dense_forward(&x, &p, &eps).unwrap();
        let m = naive_affine(x.data(), mu.weight.data(), mu.bias.data(), 4, 3, 5);
        let s = naive_affine(x.data(), sigma.weight.data(), sigma.bias.data(), 4, 3, 5);
        let want: Vec<f64> = (0..20).map(|i| m[i] + s[i] * eps.data()[i]).collect();
        exact = exact.max(max_abs_diff(got.data(), &want));
    }

    let n = 100_000;
    let (mu, sigma) = (dense(&mut r, 2, 3), dense(&mut r, 2, 3));
    let row = uniform_vec(&mut r, 3, -1.0, 1.0);
    let x = Tensor::new(vec![n, 3], row.iter().cycle().take(3 * n).copied().collect()).unwrap();
    let p = VariationalParams::new(mu.clone(), sigma.clone(), identity_acts()).unwrap();
    let out = variational_dense_forward(&x, &p, &sample_standard_normal(&[n, 2], &RngStream::new(1001))).unwrap();
    let m = naive_affine(&row, mu.weight.data(), mu.bias.data(), 1, 3, 2);
    let s = naive_affine(&row, sigma.weight.data(), sigma.bias.data(), 1, 3, 2);
    let mut worst_se = 0.0f64;
    for o in 0..2 {
        let col: Vec<f64> = out.data().iter().skip(o).step_by(2).copied().collect();
        let (em, ev) = mean_var(&col);
        let var = s[o] * s[o];
        worst_se = worst_se.max((em - m[o]).abs() / (var / n as f64).sqrt());
        worst_se = worst_se.max((ev - var).abs() / (var * (2.0 / (n as f64 - 1.0)).sqrt()));
    }
    verdict(
        exact <= 1e-12 && worst_se < 3.0,
        format!("max deviation {exact:.1e}; moments within {worst_se:.2} standard errors"),
    )
}

fn aleatoric() -> Verdict {
    let n = 100_000;
    let mut details = Vec::new();
    let mut pass = true;
    for big_sigma in [0.1, 1.0] {
        let mut r = rng(1002);
        let mu = dense(&mut r, 1, 4);
        let sigma = DenseParams::new(Tensor::zeros(&[1, 4]), Tensor::full(&[1], big_sigma)).unwrap();
        let p = VariationalParams::new(mu.clone(), sigma, identity_acts()).unwrap();
        let x = random_tensor(&mut r, &[n, 4]);
        let out = variational_dense_forward(&x, &p, &sample_standard_normal(&[n, 1], &RngStream::new(1002))).unwrap();
        let mean = naive_affine(x.data(), mu.weight.data(), mu.bias.data(), n, 4, 1);
        let resid: Vec<f64> = out.data().iter().zip(&mean).map(|(a, b)| a - b).collect();
        let sd = mean_var(&resid).1.sqrt();
        let rel = (sd / big_sigma - 1.0).abs();
        pass &= rel < 0.02;
        details.push(format!("sigma {big_sigma}: std {sd:.5} ({:.2}%)", 100.0 * rel));
    }
    verdict(pass, details.join(", "))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn random_matrix(r: &mut impl Rng, n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, _| normal(r))
}

fn oracle_exactness() -> Verdict {
    let cfg = NngpConfig::with_input_dim(3);
    let mut r = rng(1003);
    let (mut naive_err, mut interp_err) = (0.0f64, 0.0f64);
    for i in 0..20 {
        let xtr = random_matrix(&mut r, 5, 3);
        let xte = random_matrix(&mut r, 3, 3);
        let y: Vec<f64> = (0..5).map(|_| normal(&mut r)).collect();
        let noise = 0.01 + 0.05 * i as f64;
        let post = gp_posterior(&xtr, &y, &xte, &cfg, noise).unwrap();
        let (mean, cov) = naive_gp_posterior(&rows(&xtr), &y, &rows(&xte), noise, 2, 2.0, 0.1);
        naive_err = naive_err.max(max_abs_diff(post.mean.as_slice(), &mean));
        for a in 0..3 {
            for b in 0..3 {
                naive_err = naive_err.max((post.covariance[(a, b)] - cov[a][b]).abs());
            }
        }
        let at_train = gp_posterior(&xtr, &y, &xtr, &cfg, 0.0).unwrap();
        interp_err = interp_err.max(max_abs_diff(at_train.mean.as_slice(), &y));
    }
    verdict(
        naive_err <= 1e-8 && interp_err <= 1e-6,
        format!("max deviation from naive inverse {naive_err:.1e}; noiseless interpolation error {interp_err:.1e}"),
    )
}

fn kernel_validity() -> Verdict {
    let start = Instant::now();
    let cfg = NngpConfig::with_input_dim(4);
    let errs = wide_network_errors(&cfg, 8192, 10_000, 10, 1.0, &RngStream::new(1004), Execution::default()).unwrap();
    let elapsed = start.elapsed();
    verdict(
        errs.iter().all(|&e| e <= 0.05) && elapsed < Duration::from_secs(300),
        format!(
            "max relative error depth 1 {:.4}, depth 2 {:.4} (10 pairs, 10^4 nets of width 8192) in {}",
            errs[0],
            errs[1],
            secs(elapsed)
        ),
    )
}

/// Reports the oracle's own moments.
struct OracleStub<'a>(&'a GpPosterior);

impl Predictor for OracleStub<'_> {
    fn predictive_moments(&self, x: &Tensor, samples: usize, _: &RngStream, _: Execution) -> varnet::Result<PredictiveSummary> {
        let n = x.rows();
        Ok(PredictiveSummary {
            mean: Tensor::new(vec![n, 1], self.0.mean.iter().copied().collect())?,
            variance: Tensor::new(vec![n, 1], self.0.variances())?,
            sample_count: samples,
        })
    }
}

fn kl_metric() -> Verdict {
    let mut r = rng(1005);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (m1, m2) = (r.random_range(-3.0..3.0), r.random_range(-3.0..3.0));
        let (v1, v2) = (r.random_range(0.05..4.0), r.random_range(0.05..4.0));
        let got = kl_univariate_gaussian(m1, v1, m2, v2).unwrap();
        worst = worst.max((got - kl_by_quadrature(m1, v1, m2, v2)).abs());
    }
    let cfg = BenchConfig::desk_cell(10, 10, 0.1);
    let data = generate_regression_dataset(&cfg, 0).unwrap();
    let oracle = oracle_posterior(&cfg, &data).unwrap();
    let x = matrix_to_tensor(&data.x_test).unwrap();
    let id = RunId { config_id: cfg.id(), method: "oracle".into(), seed: 0 };
    let res = evaluate_uncertainty_quality(&OracleStub(&oracle), &oracle, &x, 1, &RngStream::new(0), Execution::Sequential, id)
        .unwrap();
    verdict(
        worst <= 1e-6 && res.mean_kl <= 1e-10,
        format!("max deviation from quadrature {worst:.1e}; oracle stub mean_kl {:.1e}", res.mean_kl),
    )
}

/// Soft: returns the verdict and whether every cell completed in time with
/// finite scores (the hard part).
fn uncertainty_ranking() -> (Verdict, bool) {
    let start = Instant::now();
    let cells: Vec<BenchConfig> = [1, 10, 100].into_iter().map(|l| BenchConfig::desk_cell(10, l, 0.1)).collect();
    let res = run_benchmark_suite(&cells, Execution::default()).unwrap();
    let elapsed = start.elapsed();
    let complete = res.failures.is_empty()
        && res.runs.len() == 75
        && res.runs.iter().all(|r| r.mean_kl.is_finite())
        && elapsed < Duration::from_secs(1800);
    let score = |lambda: usize, method: &str| {
        res.aggregates.iter().find(|a| a.lambda == lambda && a.method == method).map_or(f64::NAN, |a| a.mean_kl)
    };
    let mut wins = 0;
    let mut table = Vec::new();
    for lambda in [1, 10, 100] {
        let (v, b, m) = (score(lambda, "vnn"), score(lambda, "bbb"), score(lambda, "mcd"));
        wins += usize::from(v < b && v < m);
        table.push(format!(
            "lambda {lambda}: vnn {v:.3} bbb {b:.3} mcd {m:.3} ens {:.3} hyper {:.3}",
            score(lambda, "ensemble-10"),
            score(lambda, "hypermodel")
        ));
    }
    let detail = format!(
        "vnn ahead of bbb and mcd in {wins}/3 cells; {} runs, {} failures, all finite {}, {}; {}",
        res.runs.len(),
        res.failures.len(),
        res.runs.iter().all(|r| r.mean_kl.is_finite()),
        secs(elapsed),
        table.join("; ")
    );
    (verdict(complete && wins >= 2, detail), complete)
}

fn varnet() -> Command {
    Command::new(env!("CARGO_BIN_EXE_varnet"))
}

fn classification() -> Option<Verdict> {
    let root = mnist_root()?;
    let dir = tempfile::tempdir().unwrap();
    let mut details = Vec::new();
    let mut pass = true;
    for (arch, floor) in [("mlp", 0.95), ("micro", 0.97)] {
        let cfg = dir.path().join(format!("{arch}.toml"));
        std::fs::write(
            &cfg,
            format!(
                "[classify]\narchitectures = [\"{arch}\"]\nmethods = [\"vnn\"]\nepochs = 5\ndata_dir = \"{}\"\nsave_checkpoints = false\n",
                root.display()
            ),
        )
        .unwrap();
        let out = dir.path().join(arch);
        let start = Instant::now();
        let status = varnet().arg("classify").arg("--config").arg(&cfg).arg("--out").arg(&out).output().unwrap();
        let elapsed = start.elapsed();
        let acc = if status.status.success() {
            let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
            csv.lines().nth(1).and_then(|l| l.split(',').nth(4)).and_then(|v| v.parse::<f64>().ok()).unwrap_or(f64::NAN)
        } else {
            f64::NAN
        };
        pass &= acc >= floor && elapsed < Duration::from_secs(600);
        details.push(format!("{arch} vnn test accuracy {:.2}% in {}", 100.0 * acc, secs(elapsed)));
    }
    Some(verdict(pass, details.join(", ")))
}

fn run_bench(config: &Path, out: &Path) -> Vec<u8> {
    let o = varnet().arg("bench-uq").arg("--config").arg(config).arg("--out").arg(out).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::read(out.join("results.csv")).unwrap()
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let smoke = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/bench-uq-smoke.toml");
    let first = dir.path().join("first");
    run_bench(&smoke, &first);
    let manifest = first.join("manifest.json");
    let a = run_bench(&manifest, &dir.path().join("a"));
    let b = run_bench(&manifest, &dir.path().join("b"));
    verdict(a == b, format!("two runs from one manifest: {} and {} bytes, identical {}", a.len(), b.len(), a == b))
}

fn ensemble_exactness() -> Verdict {
    let arch = Architecture {
        name: "constant".into(),
        input_shape: vec![1],
        layers: vec![LayerSpec::Dense { units: 1, activation: Activation::Identity }],
    };
    let member = |c: f64| vec![Tensor::zeros(&[1, 1]), Tensor::full(&[1], c)];
    let model = Model::from_members(arch, MethodConfig::ensemble(2), vec![member(0.0), member(2.0)]).unwrap();
    let x = Tensor::new(vec![3, 1], vec![-4.0, 0.5, 9.0]).unwrap();
    let s = model.predictive_moments(&x, 1, &RngStream::new(0), Execution::Sequential).unwrap();
    let err = s
        .mean
        .data()
        .iter()
        .zip(s.variance.data())
        .map(|(m, v)| (m - 1.0).abs().max((v - 1.0).abs()))
        .fold(0.0, f64::max);
    verdict(err <= 1e-12, format!("members 0 and 2: max deviation from mean 1, variance 1 is {err:.1e}"))
}

/// Prints the criterion's line; true if it is a hard failure.
fn report(n: usize, name: &str, v: Option<Verdict>, hard: bool) -> bool {
    let Some(v) = v else {
        println!("SKIP {n:>2} {name}: MNIST not available");
        return false;
    };
    let soft = if hard { "" } else { " (soft)" };
    println!("{} {n:>2} {name}{soft}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    hard && !v.pass
}

fn main() {
    let mut failed = 0;
    failed += usize::from(report(1, "gradient integrity", Some(gradients()), true));
    failed += usize::from(report(2, "reparametrization", Some(reparametrization()), true));
    failed += usize::from(report(3, "aleatoric reduction", Some(aleatoric()), true));
    failed += usize::from(report(4, "oracle exactness", Some(oracle_exactness()), true));
    failed += usize::from(report(5, "kernel validity", Some(kernel_validity()), true));
    failed += usize::from(report(6, "kl metric", Some(kl_metric()), true));
    // the ranking is soft, but incomplete or non-finite cells are not
    let (ranking, complete) = uncertainty_ranking();
    report(7, "desk-scale uncertainty ranking", Some(ranking), false);
    failed += usize::from(!complete);
    failed += usize::from(report(8, "classification", classification(), true));
    failed += usize::from(report(9, "determinism", Some(determinism()), true));
    failed += usize::from(report(10, "ensemble exactness", Some(ensemble_exactness()), true));
    if failed > 0 {
        println!("{failed} hard criteria failed");
        std::process::exit(1);
    }
}
