use std::fmt::Write as _;

use serde::Serialize;

use super::{
    evaluate_uncertainty_quality, generate_regression_dataset, matrix_to_tensor, oracle_posterior,
    BenchConfig, KLResult, RegressionData, RunId,
};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::gp::GpPosterior;
use crate::models::{train, LossKind, MethodConfig, Model, Targets, TrainConfig, TrainingSet};
use crate::tensor::{RngStream, Tensor};

pub const CSV_HEADER: &str = "config_id,d_x,lambda,eps,method,seeds,mean_kl,std_kl";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunFailure {
    #[serde(flatten)]
    pub id: RunId,
    pub error: String,
}

/// Mean and sample standard deviation of `mean_kl` over the seeds of one
/// (cell, method) that completed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregateRow {
    pub config_id: String,
    pub d_x: usize,
    pub lambda: usize,
    pub eps: f64,
    pub method: String,
    pub seeds: usize,
    pub mean_kl: f64,
    pub std_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SuiteResult {
    pub runs: Vec<KLResult>,
    pub failures: Vec<RunFailure>,
    pub aggregates: Vec<AggregateRow>,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum Record<'a> {
    Run(&'a KLResult),
    Failure(&'a RunFailure),
}

impl SuiteResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.aggregates {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.config_id, r.d_x, r.lambda, r.eps, r.method, r.seeds, r.mean_kl, r.std_kl
            );
        }
        out
    }

    /// One JSON record per run (successful or failed).
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.runs {
            out.push_str(&serde_json::to_string(&Record::Run(r)).expect("serializable"));
            out.push('\n');
        }
        for f in &self.failures {
            out.push_str(&serde_json::to_string(&Record::Failure(f)).expect("serializable"));
            out.push('\n');
        }
        out
    }
}

struct Prepared {
    data: RegressionData,
    oracle: GpPosterior,
    x_train: Tensor,
    x_test: Tensor,
}

fn prepare(cfg: &BenchConfig, seed: u64) -> Result<Prepared> {
    let data = generate_regression_dataset(cfg, seed)?;
    let oracle = oracle_posterior(cfg, &data)?;
    Ok(Prepared {
        x_train: matrix_to_tensor(&data.x_train)?,
        x_test: matrix_to_tensor(&data.x_test)?,
        data,
        oracle,
    })
}

/// Trains one method on one dataset and scores it against the oracle.
fn run_one(cfg: &BenchConfig, method: MethodConfig, seed: u64, prep: &Prepared) -> Result<KLResult> {
    let stream = RngStream::new(seed).child(&cfg.id(), 0).child(&method.id(), 0);
    let mut model = Model::new(cfg.architecture(), method, &stream.child("init", 0))?;
    let n = prep.data.y_train.len();
    let targets = Tensor::new(vec![n, 1], prep.data.y_train.clone())?;
    let set = TrainingSet::new(prep.x_train.clone(), Targets::Values(targets))?;
    let tc = TrainConfig {
        loss: LossKind::Mse,
        optimizer: cfg.training.optimizer,
        epochs: cfg.training.epochs_for(n),
        batch_size: cfg.training.batch_size,
    };
    train(&mut model, &set, &tc, &stream.child("train", 0), Execution::Sequential)?;
    evaluate_uncertainty_quality(
        &model,
        &prep.oracle,
        &prep.x_test,
        cfg.predictive_samples,
        &stream.child("predict", 0),
        Execution::Sequential,
        RunId { config_id: cfg.id(), method: method.id(), seed },
    )
}

/// Runs every (cell, method, seed) combination. Each task is sequential
/// inside; tasks fan out over `exec`. Failed runs are reported and left out
/// of the aggregates.
pub fn run_benchmark_suite(cells: &[BenchConfig], exec: Execution) -> Result<SuiteResult> {
    for c in cells {
        c.validate()?;
    }
    let mut ids = std::collections::HashSet::new();
    for c in cells {
        if !ids.insert(c.id()) {
            return Err(Error::Config(format!("duplicate grid cell {}", c.id())));
        }
    }
    let data_jobs: Vec<(usize, u64)> = cells
        .iter()
        .enumerate()
        .flat_map(|(i, c)| c.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let prepared: Vec<Result<Prepared>> = exec.map(data_jobs.clone(), |(i, s)| prepare(&cells[i], s));

    let mut tasks = Vec::new();
    for (slot, &(i, seed)) in data_jobs.iter().enumerate() {
        for (m, _) in cells[i].methods.iter().enumerate() {
            tasks.push((slot, i, m, seed));
        }
    }
    let outcomes = exec.map(tasks.clone(), |(slot, i, m, seed)| {
        let cfg = &cells[i];
        match &prepared[slot] {
            Ok(prep) => run_one(cfg, cfg.methods[m], seed, prep),
            Err(e) => Err(Error::Numerical(format!("data generation failed: {e}"))),
        }
    });

    let mut result = SuiteResult::default();
    for (&(_, i, m, seed), outcome) in tasks.iter().zip(outcomes) {
        match outcome {
            Ok(r) if r.mean_kl.is_finite() => result.runs.push(r),
            Ok(r) => result.failures.push(RunFailure {
                id: r.id,
                error: "non-finite mean KL".into(),
            }),
            Err(e) => result.failures.push(RunFailure {
                id: RunId { config_id: cells[i].id(), method: cells[i].methods[m].id(), seed },
                error: e.to_string(),
            }),
        }
    }
    result.aggregates = aggregate(cells, &result.runs);
    Ok(result)
}

fn aggregate(cells: &[BenchConfig], runs: &[KLResult]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    for cfg in cells {
        let id = cfg.id();
        for method in &cfg.methods {
            let mid = method.id();
            let kls: Vec<f64> = runs
                .iter()
                .filter(|r| r.id.config_id == id && r.id.method == mid)
                .map(|r| r.mean_kl)
                .collect();
            if kls.is_empty() {
                continue;
            }
            let n = kls.len() as f64;
            let mean = kls.iter().sum::<f64>() / n;
            let std = if kls.len() > 1 {
                (kls.iter().map(|k| (k - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            rows.push(AggregateRow {
                config_id: id.clone(),
                d_x: cfg.input_dim,
                lambda: cfg.lambda,
                eps: cfg.noise_std,
                method: mid,
                seeds: kls.len(),
                mean_kl: mean,
                std_kl: std,
            });
        }
    }
    rows
}
