use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::method::MethodConfig;
use super::network::{EpistemicIndex, Model};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::tensor::{OptimizerConfig, OptimizerState, RngStream, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    GaussianNll,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Regression targets, one row per input.
    Values(Tensor),
    Classes(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    /// `[N, ...]`
    pub inputs: Tensor,
    pub targets: Targets,
}

impl TrainingSet {
    pub fn new(inputs: Tensor, targets: Targets) -> Result<Self> {
        let n = match &targets {
            Targets::Values(t) => t.rows(),
            Targets::Classes(c) => c.len(),
        };
        if inputs.rank() < 2 || inputs.rows() != n {
            return Err(Error::dim(format!(
                "{} targets for inputs of shape {:?}",
                n,
                inputs.shape()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
}

/// Per-epoch mean training objective, one trace per member.
#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct TrainingTrace {
    pub epoch_losses: Vec<Vec<f64>>,
}

impl TrainingTrace {
    /// Epoch losses averaged over members.
    pub fn mean_epoch_losses(&self) -> Vec<f64> {
        let k = self.epoch_losses.len() as f64;
        let epochs = self.epoch_losses.first().map_or(0, Vec::len);
        (0..epochs)
            .map(|e| self.epoch_losses.iter().map(|t| t[e]).sum::<f64>() / k)
            .collect()
    }
}

/// Trains every member of `model` in place. Ensemble member `k` shuffles
/// and draws from `stream.child("member", k)`, the same path its
/// initialisation branched from.
pub fn train(
    model: &mut Model,
    data: &TrainingSet,
    cfg: &TrainConfig,
    stream: &RngStream,
    exec: Execution,
) -> Result<TrainingTrace> {
    let streams: Vec<RngStream> =
        (0..model.member_count()).map(|k| stream.child("member", k as u64)).collect();
    train_with_member_streams(model, data, cfg, &streams, exec)
}

/// As [`train`], with one explicit stream per member.
pub fn train_with_member_streams(
    model: &mut Model,
    data: &TrainingSet,
    cfg: &TrainConfig,
    streams: &[RngStream],
    exec: Execution,
) -> Result<TrainingTrace> {
    if streams.len() != model.member_count() {
        return Err(Error::usage(format!(
            "{} member streams for {} members",
            streams.len(),
            model.member_count()
        )));
    }
    if data.is_empty() {
        return Err(Error::usage("empty training set"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    OptimizerState::new(cfg.optimizer)?;
    check_loss(model, data, cfg.loss)?;

    let jobs: Vec<(usize, Vec<Tensor>)> = model.members().iter().cloned().enumerate().collect();
    let view = &*model;
    let results = exec.map(jobs, |(k, params)| {
        train_member(view, k, params, data, cfg, &streams[k].child("train", 0))
    });
    let mut trace = TrainingTrace::default();
    for (k, r) in results.into_iter().enumerate() {
        let (params, losses) = r?;
        model.parameters_mut(k).clone_from_slice(&params);
        trace.epoch_losses.push(losses);
    }
    Ok(trace)
}

fn check_loss(model: &Model, data: &TrainingSet, loss: LossKind) -> Result<()> {
    let out = model.architecture().output_shape()?;
    let ok = match (loss, &data.targets) {
        (LossKind::Mse, Targets::Values(t)) => t.len() == data.len() * out.iter().product::<usize>(),
        (LossKind::GaussianNll, Targets::Values(t)) => out == [2] && t.len() == data.len(),
        (LossKind::CrossEntropy, Targets::Classes(_)) => out.len() == 1,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::usage(format!(
            "{loss:?} loss does not fit output {out:?} with these targets"
        )))
    }
}

fn train_member(
    model: &Model,
    member: usize,
    mut params: Vec<Tensor>,
    data: &TrainingSet,
    cfg: &TrainConfig,
    stream: &RngStream,
) -> Result<(Vec<Tensor>, Vec<f64>)> {
    let mut opt = OptimizerState::new(cfg.optimizer)?;
    let n = data.len();
    let kl_scale = match *model.method() {
        MethodConfig::Bbb { kl_weight, .. } => Some(kl_weight / n as f64),
        _ => None,
    };
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let epoch_stream = stream.child("epoch", epoch as u64);
        order.shuffle(&mut epoch_stream.child("shuffle", 0).rng());
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let x = data.inputs.select_rows(idx)?;
            let z = match *model.method() {
                MethodConfig::Ensemble { .. } => EpistemicIndex::Member(member),
                _ => model.draw_index(idx.len(), &epoch_stream.child("batch", b as u64)),
            };
            let mut tape = Tape::new();
            let leaves: Vec<_> = params.iter().map(|p| tape.leaf(p)).collect();
            let xv = tape.leaf(&x);
            let step = model
                .forward_on_tape(&mut tape, xv, &z, &leaves, kl_scale.is_some())
                .and_then(|(out, kl)| {
                    let data_loss = match &data.targets {
                        Targets::Values(t) => {
                            let t = t.select_rows(idx)?;
                            match cfg.loss {
                                LossKind::GaussianNll => tape.gaussian_nll(out, &t)?,
                                _ => tape.mse(out, &t)?,
                            }
                        }
                        Targets::Classes(c) => {
                            let labels: Vec<usize> = idx.iter().map(|&i| c[i]).collect();
                            tape.softmax_cross_entropy(out, &labels)?
                        }
                    };
                    match (kl, kl_scale) {
                        (Some(kl), Some(s)) => {
                            let kl = tape.scale(kl, s)?;
                            tape.add(data_loss, kl)
                        }
                        _ => Ok(data_loss),
                    }
                });
            let loss = match step {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => return Err(diverged(epoch, trace)),
                Err(e) => return Err(e),
            };
            let value = tape.value(loss).data()[0];
            let grads = tape.backward(loss)?;
            for (p, &v) in params.iter_mut().zip(&leaves) {
                p.set_grad(grads.wrt(v, p.len()))?;
            }
            match opt.step(&mut params) {
                Ok(()) => {}
                Err(Error::NonFinite(_)) => return Err(diverged(epoch, trace)),
                Err(e) => return Err(e),
            }
            total += value * idx.len() as f64;
        }
        let mean = total / n as f64;
        if !mean.is_finite() {
            return Err(diverged(epoch, trace));
        }
        trace.push(mean);
    }
    params.iter_mut().for_each(Tensor::clear_grad);
    Ok((params, trace))
}

fn diverged(epoch: usize, trace: Vec<f64>) -> Error {
    let mut trace = trace;
    trace.push(f64::NAN);
    Error::Training { epoch, trace }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{Architecture, LayerSpec};
    use crate::tensor::{sample_standard_normal, Activation, OptimizerKind};

    fn linear_arch(d: usize) -> Architecture {
        Architecture {
            name: "linear".into(),
            input_shape: vec![d],
            layers: vec![LayerSpec::Dense { units: 1, activation: Activation::Identity }],
        }
    }

    fn cfg(lr: f64, epochs: usize, batch: usize) -> TrainConfig {
        TrainConfig {
            loss: LossKind::Mse,
            optimizer: OptimizerConfig { learning_rate: lr, ..Default::default() },
            epochs,
            batch_size: batch,
        }
    }

    fn regression_data(n: usize, d: usize) -> TrainingSet {
        let s = RngStream::new(11);
        let x = sample_standard_normal(&[n, d], &s.child("x", 0));
        let y: Vec<f64> = (0..n).map(|i| x.row(i).iter().sum::<f64>() + 0.5).collect();
        TrainingSet::new(x, Targets::Values(Tensor::new(vec![n, 1], y).unwrap())).unwrap()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let s = RngStream::new(1);
        for method in [MethodConfig::Deterministic, MethodConfig::VNN, MethodConfig::BBB] {
            let mut m = Model::new(Architecture::regression_mlp(2, &[4]), method, &s).unwrap();
            let before = m.parameters(0).to_vec();
            train(&mut m, &regression_data(16, 2), &cfg(0.0, 2, 5), &s, Execution::Sequential).unwrap();
            assert_eq!(m.parameters(0), &before[..]);
        }
    }

    #[test]
    fn loss_decreases() {
        let s = RngStream::new(2);
        for method in [
            MethodConfig::Deterministic,
            MethodConfig::VNN,
            MethodConfig::BBB,
            MethodConfig::MCD,
            MethodConfig::ensemble(2),
            MethodConfig::HYPERMODEL,
        ] {
            let mut m = Model::new(Architecture::regression_mlp(3, &[16]), method, &s).unwrap();
            let t = train(&mut m, &regression_data(64, 3), &cfg(0.01, 20, 16), &s, Execution::Sequential)
                .unwrap();
            let l = t.mean_epoch_losses();
            assert!(l.last().unwrap() < &l[0], "{method}: {l:?}");
        }
    }

    #[test]
    fn incompatible_loss_is_rejected() {
        let s = RngStream::new(3);
        let mut m = Model::new(linear_arch(2), MethodConfig::Deterministic, &s).unwrap();
        let data = TrainingSet::new(Tensor::zeros(&[3, 2]), Targets::Classes(vec![0, 1, 0])).unwrap();
        let c = TrainConfig { loss: LossKind::Mse, ..cfg(0.1, 1, 3) };
        assert!(matches!(train(&mut m, &data, &c, &s, Execution::Sequential), Err(Error::Usage(_))));
    }

    #[test]
    fn divergence_reports_the_trace() {
        let s = RngStream::new(4);
        let mut m = Model::new(linear_arch(1), MethodConfig::Deterministic, &s).unwrap();
        let x = Tensor::new(vec![2, 1], vec![1e150, -1e150]).unwrap();
        let y = Tensor::new(vec![2, 1], vec![1e150, 0.0]).unwrap();
        let data = TrainingSet::new(x, Targets::Values(y)).unwrap();
        let c = TrainConfig {
            optimizer: OptimizerConfig { kind: OptimizerKind::Sgd, learning_rate: 1.0, ..Default::default() },
            ..cfg(1.0, 5, 2)
        };
        match train(&mut m, &data, &c, &s, Execution::Sequential) {
            Err(Error::Training { trace, .. }) => assert!(trace.last().unwrap().is_nan()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
