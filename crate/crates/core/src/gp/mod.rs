//! Exact NNGP prior and posterior for infinitely wide ReLU MLPs.
//!
//! Inputs are row matrices (`N x D`). The kernel of a network with `depth`
//! hidden ReLU layers starts from `K0(x, x') = sb2 + sw2 x.x' / D` and applies
//! the arc-cosine update once per hidden layer.

pub mod checks;
mod widenet;

pub use widenet::{explicit_network_covariance, wide_network_covariance, WideNetEstimate};

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{standard_normal_vec, RngStream};

/// Jitter ladder tried, in order, when a kernel matrix is not numerically
/// positive definite.
pub const JITTER_LADDER: [f64; 3] = [1e-8, 1e-7, 1e-6];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NngpConfig {
    /// Number of hidden ReLU layers.
    pub depth: usize,
    pub weight_variance: f64,
    pub bias_variance: f64,
    pub input_dim: usize,
}

impl Default for NngpConfig {
    fn default() -> Self {
        Self { depth: 2, weight_variance: 2.0, bias_variance: 0.1, input_dim: 1 }
    }
}

impl NngpConfig {
    pub fn with_input_dim(input_dim: usize) -> Self {
        Self { input_dim, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.input_dim == 0 {
            return Err(Error::Config("nngp depth and input_dim must be >= 1".into()));
        }
        if !(self.weight_variance > 0.0 && self.weight_variance.is_finite())
            || !(self.bias_variance >= 0.0 && self.bias_variance.is_finite())
        {
            return Err(Error::Config(format!(
                "nngp variances must be finite with sw2 > 0 and sb2 >= 0, got {} and {}",
                self.weight_variance, self.bias_variance
            )));
        }
        Ok(())
    }
}

/// One ReLU arc-cosine step applied to a covariance entry `k12` between
/// points with variances `k11`, `k22`.
pub fn relu_step(k11: f64, k12: f64, k22: f64, sw2: f64, sb2: f64) -> f64 {
    let norm = (k11 * k22).sqrt();
    if norm == 0.0 {
        return sb2;
    }
    let cos = (k12 / norm).clamp(-1.0, 1.0);
    let theta = cos.acos();
    sb2 + sw2 / (2.0 * PI) * norm * (theta.sin() + (PI - theta) * cos)
}

fn check_columns(x: &DMatrix<f64>, cfg: &NngpConfig, what: &str) -> Result<()> {
    if x.ncols() != cfg.input_dim {
        return Err(Error::dim(format!(
            "{what} has {} columns, kernel expects {}",
            x.ncols(),
            cfg.input_dim
        )));
    }
    Ok(())
}

fn base_kernel(a: &[f64], b: &[f64], cfg: &NngpConfig) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    cfg.bias_variance + cfg.weight_variance * dot / cfg.input_dim as f64
}

fn rows(x: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..x.nrows()).map(|i| x.row(i).iter().copied().collect()).collect()
}

/// Kernel values at each layer `0..=depth` for one pair of inputs:
/// `[k11, k12, k22]` per layer.
pub fn kernel_trace(a: &[f64], b: &[f64], cfg: &NngpConfig) -> Vec<[f64; 3]> {
    let mut k = [base_kernel(a, a, cfg), base_kernel(a, b, cfg), base_kernel(b, b, cfg)];
    let mut out = vec![k];
    for _ in 0..cfg.depth {
        let (sw2, sb2) = (cfg.weight_variance, cfg.bias_variance);
        k = [
            relu_step(k[0], k[0], k[0], sw2, sb2),
            relu_step(k[0], k[1], k[2], sw2, sb2),
            relu_step(k[2], k[2], k[2], sw2, sb2),
        ];
        out.push(k);
    }
    out
}

/// `K(X1, X2)` of the output of a `depth`-hidden-layer ReLU network.
pub fn nngp_kernel(x1: &DMatrix<f64>, x2: &DMatrix<f64>, cfg: &NngpConfig) -> Result<DMatrix<f64>> {
    cfg.validate()?;
    check_columns(x1, cfg, "X1")?;
    check_columns(x2, cfg, "X2")?;
    let (r1, r2) = (rows(x1), rows(x2));
    let mut d1: Vec<f64> = r1.iter().map(|a| base_kernel(a, a, cfg)).collect();
    let mut d2: Vec<f64> = r2.iter().map(|b| base_kernel(b, b, cfg)).collect();
    let mut k = DMatrix::from_fn(r1.len(), r2.len(), |i, j| base_kernel(&r1[i], &r2[j], cfg));
    let (sw2, sb2) = (cfg.weight_variance, cfg.bias_variance);
    for _ in 0..cfg.depth {
        for j in 0..k.ncols() {
            for i in 0..k.nrows() {
                k[(i, j)] = relu_step(d1[i], k[(i, j)], d2[j], sw2, sb2);
            }
        }
        d1.iter_mut().for_each(|d| *d = relu_step(*d, *d, *d, sw2, sb2));
        d2.iter_mut().for_each(|d| *d = relu_step(*d, *d, *d, sw2, sb2));
    }
    Ok(k)
}

/// Cholesky factor of `k + jitter I`, escalating along the jitter ladder.
/// `start_without_jitter` tries the bare matrix first.
pub fn robust_cholesky(
    k: &DMatrix<f64>,
    start_without_jitter: bool,
) -> Result<(Cholesky<f64, Dyn>, f64)> {
    let first = if start_without_jitter { Some(0.0) } else { None };
    for jitter in first.into_iter().chain(JITTER_LADDER) {
        let mut m = k.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(m) {
            return Ok((c, jitter));
        }
    }
    Err(Error::Numerical(format!(
        "kernel matrix of size {} not positive definite with jitter up to {:e}",
        k.nrows(),
        JITTER_LADDER[JITTER_LADDER.len() - 1]
    )))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GpPosterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    /// Aleatoric noise variance of the observations.
    pub noise_variance: f64,
    /// Solution of `(K + noise I) alpha = y`: solved with the jittered
    /// factor, then refined against the unjittered system.
    pub alpha: DVector<f64>,
    /// Jitter added to the diagonal of the training kernel.
    pub jitter: f64,
}

impl GpPosterior {
    pub fn variances(&self) -> Vec<f64> {
        self.covariance.diagonal().iter().copied().collect()
    }
}

/// Iterative refinement of `k alpha = y` with the jittered factor as
/// preconditioner. Without it the jitter leaks into the solution (the
/// residual is `jitter * alpha`, which for a noiseless fit is the
/// interpolation error). A step is kept only if it shrinks the residual, so
/// singular `k` cannot blow up `alpha`.
fn refine(k: &DMatrix<f64>, chol: &Cholesky<f64, Dyn>, y: &DVector<f64>, mut alpha: DVector<f64>) -> DVector<f64> {
    let mut r = y - k * &alpha;
    let mut norm = r.amax();
    for _ in 0..50 {
        if norm == 0.0 {
            break;
        }
        let next = &alpha + chol.solve(&r);
        let r_next = y - k * &next;
        let n = r_next.amax();
        if n >= norm {
            break;
        }
        (alpha, r, norm) = (next, r_next, n);
    }
    alpha
}

/// Exact GP regression posterior at `x_test` given noisy observations.
pub fn gp_posterior(
    x_train: &DMatrix<f64>,
    y_train: &[f64],
    x_test: &DMatrix<f64>,
    cfg: &NngpConfig,
    noise_variance: f64,
) -> Result<GpPosterior> {
    if !(noise_variance >= 0.0 && noise_variance.is_finite()) {
        return Err(Error::Domain(format!("noise variance must be >= 0, got {noise_variance}")));
    }
    if x_train.nrows() != y_train.len() {
        return Err(Error::dim(format!(
            "{} training inputs but {} targets",
            x_train.nrows(),
            y_train.len()
        )));
    }
    let k_ss = nngp_kernel(x_test, x_test, cfg)?;
    if y_train.is_empty() {
        return Ok(GpPosterior {
            mean: DVector::zeros(x_test.nrows()),
            covariance: k_ss,
            noise_variance,
            alpha: DVector::zeros(0),
            jitter: 0.0,
        });
    }
    let mut k = nngp_kernel(x_train, x_train, cfg)?;
    for i in 0..k.nrows() {
        k[(i, i)] += noise_variance;
    }
    let (chol, jitter) = robust_cholesky(&k, noise_variance > 0.0)?;
    let k_s = nngp_kernel(x_train, x_test, cfg)?;
    let y = DVector::from_column_slice(y_train);
    let alpha = refine(&k, &chol, &y, chol.solve(&y));
    let mean = k_s.transpose() * &alpha;
    let v = chol
        .l()
        .solve_lower_triangular(&k_s)
        .ok_or_else(|| Error::Numerical("singular cholesky factor".into()))?;
    let mut covariance = k_ss - v.transpose() * &v;
    covariance = (&covariance + covariance.transpose()) * 0.5;
    Ok(GpPosterior { mean, covariance, noise_variance, alpha, jitter })
}

/// A draw of the noiseless function values `f ~ N(0, K(X, X))`.
pub fn gp_prior_function_sample(x: &DMatrix<f64>, cfg: &NngpConfig, stream: &RngStream) -> Result<Vec<f64>> {
    if x.nrows() == 0 {
        return Err(Error::usage("need at least one input"));
    }
    let k = nngp_kernel(x, x, cfg)?;
    let (chol, _) = robust_cholesky(&k, false)?;
    let z = DVector::from_vec(standard_normal_vec(&mut stream.rng(), x.nrows()));
    Ok((chol.l() * z).iter().copied().collect())
}

/// `y = f + noise_std * eps` with `f` from [`gp_prior_function_sample`].
pub fn gp_prior_sample(
    x: &DMatrix<f64>,
    cfg: &NngpConfig,
    noise_variance: f64,
    stream: &RngStream,
) -> Result<Vec<f64>> {
    if !(noise_variance >= 0.0) {
        return Err(Error::Domain(format!("noise variance must be >= 0, got {noise_variance}")));
    }
    let f = gp_prior_function_sample(x, cfg, &stream.child("function", 0))?;
    let eps = standard_normal_vec(&mut stream.child("noise", 0).rng(), f.len());
    let sd = noise_variance.sqrt();
    Ok(f.iter().zip(eps).map(|(f, e)| f + sd * e).collect())
}
