//! MNIST grid: every (architecture, method) pair is trained on a stratified
//! subset, ranked on a held-out validation split and scored on the test
//! split.

use std::fmt::Write as _;

use serde::Serialize;

use super::config::ClassifyFile;
use crate::datasets::{subset_indices, LabeledDataset};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::models::{train, Architecture, LayerSpec, LossKind, Model, Targets, TrainConfig, TrainingSet};
use crate::tensor::{OptimizerConfig, RngStream, Tensor};

pub const CSV_HEADER: &str =
    "architecture,method,parameters,validation_accuracy,test_accuracy,mean_entropy,top2";

/// The three disjoint splits a grid is run on.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: LabeledDataset,
    pub validation: LabeledDataset,
    pub test: LabeledDataset,
}

/// Validation images are drawn first from the training split; the training
/// subset is drawn from what remains. Sizes of 0 mean "everything left".
pub fn make_splits(
    train: &LabeledDataset,
    test: &LabeledDataset,
    train_size: usize,
    validation_size: usize,
    test_size: usize,
    stream: &RngStream,
) -> Result<Splits> {
    let k = train.class_count;
    let val_idx = if validation_size == 0 {
        Vec::new()
    } else {
        subset_indices(&train.labels, k, validation_size, &stream.child("validation", 0))?
    };
    let mut taken = vec![false; train.len()];
    val_idx.iter().for_each(|&i| taken[i] = true);
    let rest: Vec<usize> = (0..train.len()).filter(|&i| !taken[i]).collect();
    let train_idx = if train_size == 0 || train_size == rest.len() {
        rest
    } else {
        let labels: Vec<usize> = rest.iter().map(|&i| train.labels[i]).collect();
        subset_indices(&labels, k, train_size, &stream.child("train", 0))?
            .into_iter()
            .map(|j| rest[j])
            .collect()
    };
    let test = if test_size == 0 || test_size == test.len() {
        test.clone()
    } else {
        test.select(&subset_indices(&test.labels, k, test_size, &stream.child("test", 0))?)?
    };
    Ok(Splits { train: train.select(&train_idx)?, validation: train.select(&val_idx)?, test })
}

impl Splits {
    /// Shifts and scales every split by the training pixels' mean and
    /// standard deviation.
    pub fn standardize(&mut self) {
        let px = self.train.inputs.data();
        let n = px.len().max(1) as f64;
        let mean = px.iter().sum::<f64>() / n;
        let std = (px.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-12);
        for d in [&mut self.train, &mut self.validation, &mut self.test] {
            d.inputs.data_mut().iter_mut().for_each(|v| *v = (*v - mean) / std);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Score {
    pub accuracy: f64,
    /// Entropy (nats) of the averaged predictive distribution, averaged over
    /// inputs.
    pub mean_entropy: f64,
}

pub fn score(model: &Model, data: &LabeledDataset, samples: usize, stream: &RngStream, exec: Execution) -> Result<Score> {
    if data.is_empty() {
        return Ok(Score { accuracy: f64::NAN, mean_entropy: f64::NAN });
    }
    let probs = model.predictive_class_probabilities(&data.inputs, samples, stream, exec)?;
    let c = probs.shape()[1];
    let (mut correct, mut entropy) = (0usize, 0.0);
    for (row, &label) in probs.data().chunks(c).zip(&data.labels) {
        let argmax = (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best });
        correct += usize::from(argmax == label);
        entropy -= row.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>();
    }
    let n = data.len() as f64;
    Ok(Score { accuracy: correct as f64 / n, mean_entropy: entropy / n })
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassifyRow {
    pub architecture: String,
    pub method: String,
    pub parameters: usize,
    pub validation: Score,
    pub test: Score,
    pub top2: bool,
    #[serde(skip)]
    pub model: Model,
}

fn run_one(cfg: &ClassifyFile, splits: &Splits, arch: &str, method: &str, root: &RngStream, exec: Execution) -> Result<ClassifyRow> {
    let c = &cfg.classify;
    let method = cfg.methods.resolve(method)?;
    let stream = root.child(arch, 0).child(&method.id(), 0);
    let architecture = Architecture::preset(arch)?;
    let conv = architecture.layers.iter().any(|l| matches!(l, LayerSpec::Conv2d { .. }));
    let mut model = Model::new(architecture, method, &stream.child("init", 0))?;
    let set = TrainingSet::new(splits.train.inputs.clone(), Targets::Classes(splits.train.labels.clone()))?;
    let tc = TrainConfig {
        loss: LossKind::CrossEntropy,
        optimizer: OptimizerConfig { learning_rate: c.learning_rate, weight_decay: c.weight_decay, ..Default::default() },
        epochs: c.epochs,
        batch_size: if conv { c.conv_batch_size } else { c.batch_size },
    };
    train(&mut model, &set, &tc, &stream.child("train", 0), exec)?;
    let predict = stream.child("predict", 0);
    let validation = score(&model, &splits.validation, c.predictive_samples, &predict.child("validation", 0), exec)?;
    let test = score(&model, &splits.test, c.predictive_samples, &predict.child("test", 0), exec)?;
    Ok(ClassifyRow {
        architecture: arch.to_string(),
        method: method.id(),
        parameters: model.parameter_count(),
        validation,
        test,
        top2: false,
        model,
    })
}

/// Trains and scores the whole grid. Models are trained one after another;
/// `exec` fans out ensemble members and Monte Carlo passes within each.
pub fn run_classification(cfg: &ClassifyFile, splits: &Splits, seed: u64, exec: Execution) -> Result<Vec<ClassifyRow>> {
    cfg.validate()?;
    if splits.train.is_empty() {
        return Err(Error::Config("empty training split".into()));
    }
    let root = RngStream::new(seed).child("classify", 0);
    let mut rows = Vec::new();
    for arch in &cfg.classify.architectures {
        for method in &cfg.classify.methods {
            rows.push(run_one(cfg, splits, arch, method, &root, exec)?);
        }
    }
    mark_top2(&mut rows);
    Ok(rows)
}

/// Flags the two architectures with the best validation accuracy for each
/// method; ties keep grid order.
pub fn mark_top2(rows: &mut [ClassifyRow]) {
    let mut methods: Vec<String> = rows.iter().map(|r| r.method.clone()).collect();
    methods.sort();
    methods.dedup();
    for m in methods {
        let mut idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].method == m).collect();
        idx.sort_by(|&a, &b| rows[b].validation.accuracy.total_cmp(&rows[a].validation.accuracy).then(a.cmp(&b)));
        for &i in idx.iter().take(2) {
            rows[i].top2 = true;
        }
    }
}

pub fn to_csv(rows: &[ClassifyRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.architecture,
            r.method,
            r.parameters,
            r.validation.accuracy,
            r.test.accuracy,
            r.test.mean_entropy,
            r.top2
        );
    }
    out
}

/// Easily separable 28x28 images for smoke tests that must not depend on
/// downloaded data.
pub fn synthetic_digits(n: usize, stream: &RngStream) -> Result<LabeledDataset> {
    // class k lights a 4x4 block at its own position over faint noise
    let noise = crate::tensor::sample_standard_normal(&[n, 1, 28, 28], stream);
    let mut data = noise.into_data();
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    for (i, &k) in labels.iter().enumerate() {
        let img = &mut data[i * 784..(i + 1) * 784];
        img.iter_mut().for_each(|v| *v = (*v * 0.1).abs());
        let (r0, c0) = (2 + (k / 5) * 12, 2 + (k % 5) * 5);
        for r in r0..r0 + 4 {
            for c in c0..c0 + 4 {
                img[r * 28 + c] = 1.0;
            }
        }
    }
    LabeledDataset::new(Tensor::new(vec![n, 1, 28, 28], data)?, labels, 10)
}
