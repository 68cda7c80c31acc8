//! Self-checks of the oracle against independent computations, run by the
//! `gp-check` subcommand.

use nalgebra::DMatrix;
use serde::Serialize;

use super::{gp_posterior, kernel_trace, nngp_kernel, robust_cholesky, wide_network_covariance, NngpConfig};
use crate::exec::Execution;
use crate::tensor::{standard_normal_vec, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckSettings {
    pub width: usize,
    pub nets: usize,
    pub pairs: usize,
    pub input_dim: usize,
    pub seed: u64,
    /// Multiplies the analytic kernel before it is compared with the wide
    /// networks; anything but 1 should make that check fail.
    pub kernel_perturbation: f64,
}

impl Default for CheckSettings {
    fn default() -> Self {
        Self { width: 8192, nets: 2000, pairs: 5, input_dim: 4, seed: 0, kernel_perturbation: 1.0 }
    }
}

/// Gauss-Jordan inverse with partial pivoting; `None` if singular.
pub fn naive_inverse(m: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = m.len();
    let mut a: Vec<Vec<f64>> = m
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut r = row.clone();
            r.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            r
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        let p = a[col][col];
        a[col].iter_mut().for_each(|v| *v /= p);
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    let pivot_row = a[col].clone();
                    a[r].iter_mut().zip(&pivot_row).for_each(|(v, pv)| *v -= f * pv);
                }
            }
        }
    }
    Some(a.into_iter().map(|r| r[n..].to_vec()).collect())
}

fn rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect()
}

fn pair_kernel(a: &[f64], b: &[f64], cfg: &NngpConfig) -> f64 {
    kernel_trace(a, b, cfg)[cfg.depth][1]
}

/// Posterior mean and covariance by explicit inversion, kernel entries
/// evaluated pair by pair.
pub fn naive_posterior(
    x_train: &DMatrix<f64>,
    y: &[f64],
    x_test: &DMatrix<f64>,
    cfg: &NngpConfig,
    noise: f64,
) -> Option<(Vec<f64>, Vec<Vec<f64>>)> {
    let (tr, te) = (rows(x_train), rows(x_test));
    let k: Vec<Vec<f64>> = tr
        .iter()
        .enumerate()
        .map(|(i, a)| {
            tr.iter()
                .enumerate()
                .map(|(j, b)| pair_kernel(a, b, cfg) + if i == j { noise } else { 0.0 })
                .collect()
        })
        .collect();
    let inv = naive_inverse(&k)?;
    let ks: Vec<Vec<f64>> = te.iter().map(|t| tr.iter().map(|a| pair_kernel(a, t, cfg)).collect()).collect();
    let weights: Vec<Vec<f64>> = ks
        .iter()
        .map(|row| (0..tr.len()).map(|j| row.iter().zip(&inv).map(|(k, r)| k * r[j]).sum()).collect())
        .collect();
    let mean = weights.iter().map(|w| w.iter().zip(y).map(|(w, y)| w * y).sum()).collect();
    let cov = te
        .iter()
        .enumerate()
        .map(|(i, a)| {
            te.iter()
                .enumerate()
                .map(|(j, b)| pair_kernel(a, b, cfg) - weights[i].iter().zip(&ks[j]).map(|(w, k)| w * k).sum::<f64>())
                .collect()
        })
        .collect();
    Some((mean, cov))
}

fn random_matrix(n: usize, d: usize, stream: &RngStream) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, d, &standard_normal_vec(&mut stream.rng(), n * d))
}

fn outcome(name: &str, passed: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name: name.into(), passed, detail }
}

/// Largest relative error of the analytic kernel (times `perturbation`)
/// against wide-network estimates, per depth, over random input pairs.
pub fn wide_network_errors(
    cfg: &NngpConfig,
    width: usize,
    nets: usize,
    pairs: usize,
    perturbation: f64,
    stream: &RngStream,
    exec: Execution,
) -> crate::Result<Vec<f64>> {
    let mut worst = vec![0.0f64; cfg.depth];
    for p in 0..pairs {
        let s = stream.child("pair", p as u64);
        let x = standard_normal_vec(&mut s.child("inputs", 0).rng(), 2 * cfg.input_dim);
        let (a, b) = x.split_at(cfg.input_dim);
        let est = wide_network_covariance(a, b, cfg, width, nets, &s.child("nets", 0), exec)?;
        let exact = kernel_trace(a, b, cfg);
        for (l, w) in worst.iter_mut().enumerate() {
            for e in 0..3 {
                let k = exact[l + 1][e] * perturbation;
                *w = w.max((est.covariances[l][e] - k).abs() / k.abs());
            }
        }
    }
    Ok(worst)
}

pub fn run_checks(settings: &CheckSettings, exec: Execution) -> Vec<CheckOutcome> {
    let root = RngStream::new(settings.seed).child("gp-check", 0);
    let cfg = NngpConfig::with_input_dim(settings.input_dim);
    let mut out = Vec::new();

    match wide_network_errors(
        &cfg,
        settings.width,
        settings.nets,
        settings.pairs,
        settings.kernel_perturbation,
        &root.child("wide", 0),
        exec,
    ) {
        Ok(errs) => {
            for (l, e) in errs.iter().enumerate() {
                out.push(outcome(
                    &format!("kernel-vs-wide-networks-depth-{}", l + 1),
                    *e <= 0.05,
                    format!(
                        "max relative error {e:.4} over {} pairs ({} nets of width {})",
                        settings.pairs, settings.nets, settings.width
                    ),
                ));
            }
        }
        Err(e) => out.push(outcome("kernel-vs-wide-networks", false, e.to_string())),
    }

    let mut worst_naive = 0.0f64;
    let mut worst_residual = 0.0f64;
    let mut worst_excess = f64::NEG_INFINITY;
    let mut failures = 0;
    for i in 0..20 {
        let s = root.child("posterior", i);
        let xtr = random_matrix(5, cfg.input_dim, &s.child("train", 0));
        let xte = random_matrix(3, cfg.input_dim, &s.child("test", 0));
        let y = standard_normal_vec(&mut s.child("y", 0).rng(), 5);
        let noise = 0.01 + 0.99 * (i as f64 / 19.0);
        let (Ok(post), Some((mean, cov))) =
            (gp_posterior(&xtr, &y, &xte, &cfg, noise), naive_posterior(&xtr, &y, &xte, &cfg, noise))
        else {
            failures += 1;
            continue;
        };
        for r in 0..3 {
            worst_naive = worst_naive.max((post.mean[r] - mean[r]).abs());
            for c in 0..3 {
                worst_naive = worst_naive.max((post.covariance[(r, c)] - cov[r][c]).abs());
            }
        }
        let mut k = nngp_kernel(&xtr, &xtr, &cfg).expect("valid shapes");
        for d in 0..5 {
            k[(d, d)] += noise;
        }
        let residual = (&k * &post.alpha - nalgebra::DVector::from_column_slice(&y)).amax();
        worst_residual = worst_residual.max(residual);
        let prior = nngp_kernel(&xte, &xte, &cfg).expect("valid shapes");
        for d in 0..3 {
            worst_excess = worst_excess.max(post.covariance[(d, d)] - prior[(d, d)]);
        }
    }
    out.push(outcome(
        "posterior-vs-naive-inverse",
        failures == 0 && worst_naive <= 1e-8,
        format!("max abs difference {worst_naive:.2e} over 20 instances, {failures} failed"),
    ));
    out.push(outcome(
        "posterior-residual",
        failures == 0 && worst_residual <= 1e-8,
        format!("max |(K + noise I) alpha - y| = {worst_residual:.2e}"),
    ));
    out.push(outcome(
        "posterior-variance-below-prior",
        failures == 0 && worst_excess <= 1e-10,
        format!("max posterior minus prior variance {worst_excess:.2e}"),
    ));

    let x = random_matrix(4, cfg.input_dim, &root.child("interp", 0));
    let y = standard_normal_vec(&mut root.child("interp-y", 0).rng(), 4);
    match gp_posterior(&x, &y, &x, &cfg, 0.0) {
        Ok(p) => {
            let err = p.mean.iter().zip(&y).map(|(m, y)| (m - y).abs()).fold(0.0, f64::max);
            out.push(outcome(
                "noiseless-interpolation",
                err <= 1e-6,
                format!("max |mean - y| = {err:.2e}"),
            ));
        }
        Err(e) => out.push(outcome("noiseless-interpolation", false, e.to_string())),
    }

    let x = random_matrix(200, cfg.input_dim, &root.child("psd", 0));
    let k = nngp_kernel(&x, &x, &cfg).expect("valid shapes");
    let sym = (&k - k.transpose()).amax();
    let chol = robust_cholesky(&k, true);
    out.push(outcome(
        "kernel-symmetric-psd",
        sym <= 1e-12 && chol.is_ok(),
        match chol {
            Ok((_, jitter)) => format!("asymmetry {sym:.1e}, factorized with jitter {jitter:e} on 200 points"),
            Err(e) => e.to_string(),
        },
    ));
    out
}
