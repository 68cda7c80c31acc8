//! Synthetic regression benchmark: data drawn from an NNGP prior, methods
//! trained on it and scored by KL divergence from the exact GP posterior.

mod suite;
pub mod svg;

pub use suite::{run_benchmark_suite, AggregateRow, RunFailure, SuiteResult, CSV_HEADER};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gp::{gp_posterior, gp_prior_function_sample, GpPosterior, NngpConfig};
use crate::models::{Architecture, MethodConfig, Model, PredictiveSummary};
use crate::tensor::{standard_normal_vec, OptimizerConfig, RngStream, Tensor};

/// Floor applied to model variances before the aleatoric term is added.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSettings {
    pub hidden: Vec<usize>,
    /// Gradient steps; rounded up to whole epochs.
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        Self {
            hidden: vec![50, 50],
            steps: 1000,
            batch_size: 100,
            optimizer: OptimizerConfig { learning_rate: 1e-3, ..Default::default() },
        }
    }
}

impl TrainingSettings {
    pub fn epochs_for(&self, n_train: usize) -> usize {
        let per_epoch = n_train.div_ceil(self.batch_size.max(1));
        self.steps.div_ceil(per_epoch.max(1))
    }
}

/// One cell of the benchmark grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub input_dim: usize,
    pub lambda: usize,
    /// Standard deviation of the observation noise.
    pub noise_std: f64,
    pub n_test: usize,
    pub seeds: Vec<u64>,
    pub predictive_samples: usize,
    pub methods: Vec<MethodConfig>,
    /// Depth and variances of the oracle; its input dimension is taken from
    /// `input_dim`.
    pub nngp: NngpConfig,
    pub training: TrainingSettings,
}

impl BenchConfig {
    pub fn desk_cell(input_dim: usize, lambda: usize, noise_std: f64) -> Self {
        Self {
            input_dim,
            lambda,
            noise_std,
            n_test: 100,
            seeds: (0..5).collect(),
            predictive_samples: 100,
            methods: vec![
                MethodConfig::VNN,
                MethodConfig::BBB,
                MethodConfig::MCD,
                MethodConfig::ensemble(10),
                MethodConfig::HYPERMODEL,
            ],
            nngp: NngpConfig::with_input_dim(input_dim),
            training: TrainingSettings::default(),
        }
    }

    pub fn train_size(&self) -> usize {
        self.input_dim * self.lambda
    }

    pub fn id(&self) -> String {
        format!("dx{}-lambda{}-eps{}", self.input_dim, self.lambda, self.noise_std)
    }

    pub fn nngp(&self) -> NngpConfig {
        NngpConfig { input_dim: self.input_dim, ..self.nngp }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.lambda == 0 {
            return bad(format!("{}: d_x and lambda must be >= 1", self.id()));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return bad(format!("{}: eps must be > 0", self.id()));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.n_test == 0 || self.predictive_samples == 0 {
            return bad("n_test and predictive_samples must be >= 1".into());
        }
        if self.training.batch_size == 0 || self.training.hidden.contains(&0) {
            return bad("batch_size and hidden widths must be >= 1".into());
        }
        if self.methods.is_empty() {
            return bad("method list must not be empty".into());
        }
        for m in &self.methods {
            m.validate()?;
        }
        self.nngp().validate()?;
        crate::tensor::OptimizerState::new(self.training.optimizer)?;
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::regression_mlp(self.input_dim, &self.training.hidden)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionData {
    pub x_train: DMatrix<f64>,
    pub y_train: Vec<f64>,
    pub x_test: DMatrix<f64>,
    /// Noiseless function values at the test inputs.
    pub f_test: Vec<f64>,
}

pub fn matrix_to_tensor(m: &DMatrix<f64>) -> Result<Tensor> {
    let data = (0..m.nrows()).flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect();
    Tensor::new(vec![m.nrows(), m.ncols()], data)
}

/// Data stream for one (cell, seed): shared by every method so they are
/// scored on identical datasets.
fn data_stream(cfg: &BenchConfig, seed: u64) -> RngStream {
    RngStream::new(seed).child(&cfg.id(), 0).child("data", 0)
}

/// Standard-normal inputs; targets are one NNGP prior function evaluated
/// jointly over train and test inputs, plus noise on the training targets.
pub fn generate_regression_dataset(cfg: &BenchConfig, seed: u64) -> Result<RegressionData> {
    let s = data_stream(cfg, seed);
    let (n_train, d) = (cfg.train_size(), cfg.input_dim);
    let n = n_train + cfg.n_test;
    let xs = standard_normal_vec(&mut s.child("inputs", 0).rng(), n * d);
    let x = DMatrix::from_row_slice(n, d, &xs);
    let f = gp_prior_function_sample(&x, &cfg.nngp(), &s.child("function", 0))?;
    let noise = standard_normal_vec(&mut s.child("noise", 0).rng(), n_train);
    let y_train = f[..n_train].iter().zip(noise).map(|(f, e)| f + cfg.noise_std * e).collect();
    Ok(RegressionData {
        x_train: x.rows(0, n_train).into_owned(),
        y_train,
        x_test: x.rows(n_train, cfg.n_test).into_owned(),
        f_test: f[n_train..].to_vec(),
    })
}

/// The exact posterior over `f` at the test inputs.
pub fn oracle_posterior(cfg: &BenchConfig, data: &RegressionData) -> Result<GpPosterior> {
    gp_posterior(&data.x_train, &data.y_train, &data.x_test, &cfg.nngp(), cfg.noise_std.powi(2))
}

/// `KL(N(mu1, var1) || N(mu2, var2))`.
pub fn kl_univariate_gaussian(mu1: f64, var1: f64, mu2: f64, var2: f64) -> Result<f64> {
    if !(var1 > 0.0 && var2 > 0.0) {
        return Err(Error::Domain(format!("variances must be positive, got {var1} and {var2}")));
    }
    Ok(0.5 * ((var2 / var1).ln() + (var1 + (mu1 - mu2).powi(2)) / var2 - 1.0))
}

/// Anything that yields Monte Carlo predictive moments.
pub trait Predictor: Sync {
    fn predictive_moments(
        &self,
        x: &Tensor,
        samples: usize,
        stream: &RngStream,
        exec: Execution,
    ) -> Result<PredictiveSummary>;
}

impl Predictor for Model {
    fn predictive_moments(
        &self,
        x: &Tensor,
        samples: usize,
        stream: &RngStream,
        exec: Execution,
    ) -> Result<PredictiveSummary> {
        Model::predictive_moments(self, x, samples, stream, exec)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunId {
    pub config_id: String,
    pub method: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KLResult {
    #[serde(flatten)]
    pub id: RunId,
    pub mean_kl: f64,
    pub per_point_kl: Vec<f64>,
}

/// Marginal KL from the oracle's predictive `N(mu_GP, k_ii + eps^2)` to the
/// model's `N(mean_i, max(var_i, floor) + eps^2)`, averaged over test points.
pub fn evaluate_uncertainty_quality<P: Predictor + ?Sized>(
    model: &P,
    oracle: &GpPosterior,
    x_test: &Tensor,
    samples: usize,
    stream: &RngStream,
    exec: Execution,
    id: RunId,
) -> Result<KLResult> {
    let n = oracle.mean.len();
    if x_test.rows() != n {
        return Err(Error::usage(format!("oracle covers {n} points, x_test has {}", x_test.rows())));
    }
    let p = model.predictive_moments(x_test, samples, stream, exec)?;
    if p.mean.len() != n || p.variance.len() != n {
        return Err(Error::usage(format!(
            "model predicts {} values for {n} test points",
            p.mean.len()
        )));
    }
    let noise = oracle.noise_variance;
    let per_point = (0..n)
        .map(|i| {
            kl_univariate_gaussian(
                oracle.mean[i],
                oracle.covariance[(i, i)].max(0.0) + noise,
                p.mean.data()[i],
                p.variance.data()[i].max(VARIANCE_FLOOR) + noise,
            )
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(KLResult {
        id,
        mean_kl: per_point.iter().sum::<f64>() / n as f64,
        per_point_kl: per_point,
    })
}
