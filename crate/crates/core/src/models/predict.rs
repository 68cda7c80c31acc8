use super::method::MethodConfig;
use super::network::{EpistemicIndex, Model};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::tensor::{softmax_rows, RngStream, Tensor};

/// Inputs are pushed through the network in chunks of at most this many
/// rows, bounding the memory of convolutional passes.
const PREDICT_CHUNK: usize = 256;

/// Monte Carlo summary of the predictive distribution at a batch of inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveSummary {
    /// `[B, out]`
    pub mean: Tensor,
    /// Diagonal of the predictive covariance, `[B, out]`.
    pub variance: Tensor,
    /// Number of indexed passes averaged.
    pub sample_count: usize,
}

impl Model {
    /// One indexed pass over `x` with the index for pass `draw`. Large
    /// inputs are split into chunks; all chunks share one sampled function
    /// (VNN noise is per row anyway, so its chunks draw fresh noise).
    fn pass(&self, x: &Tensor, draw: Option<usize>, stream: &RngStream) -> Result<Tensor> {
        let rows = x.rows();
        let per_row = matches!(self.method(), MethodConfig::Vnn { .. });
        let shared = match draw {
            Some(i) if !per_row => Some(self.draw_index(1, &stream.child("draw", i as u64))),
            _ => None,
        };
        let index_for = |chunk: usize, len: usize| match (draw, &shared) {
            (None, _) => EpistemicIndex::Empty,
            (Some(_), Some(z)) => z.clone(),
            (Some(i), None) => {
                self.draw_index(len, &stream.child("draw", i as u64).child("chunk", chunk as u64))
            }
        };
        if rows <= PREDICT_CHUNK {
            return self.forward_indexed(x, &index_for(0, rows));
        }
        let mut data = Vec::new();
        let mut shape = Vec::new();
        for (c, start) in (0..rows).step_by(PREDICT_CHUNK).enumerate() {
            let idx: Vec<usize> = (start..(start + PREDICT_CHUNK).min(rows)).collect();
            let part = self.forward_indexed(&x.select_rows(&idx)?, &index_for(c, idx.len()))?;
            shape = part.shape().to_vec();
            data.extend(part.into_data());
        }
        shape[0] = rows;
        Tensor::new(shape, data)
    }

    fn member_pass(&self, x: &Tensor, k: usize) -> Result<Tensor> {
        let rows = x.rows();
        let mut out: Option<(Vec<usize>, Vec<f64>)> = None;
        for start in (0..rows).step_by(PREDICT_CHUNK) {
            let idx: Vec<usize> = (start..(start + PREDICT_CHUNK).min(rows)).collect();
            let part = self.forward_indexed(&x.select_rows(&idx)?, &EpistemicIndex::Member(k))?;
            let entry = out.get_or_insert_with(|| (part.shape().to_vec(), Vec::new()));
            entry.1.extend_from_slice(part.data());
        }
        let (mut shape, data) = out.expect("non-empty input");
        shape[0] = rows;
        Tensor::new(shape, data)
    }

    /// Outputs of the passes a predictive estimate averages over:
    /// one pass for a deterministic net, every member of an ensemble, and
    /// `t` independent index draws otherwise.
    pub fn indexed_outputs(
        &self,
        x: &Tensor,
        t: usize,
        stream: &RngStream,
        exec: Execution,
    ) -> Result<Vec<Tensor>> {
        if t == 0 {
            return Err(Error::usage("need at least one predictive sample"));
        }
        if x.rank() < 2 {
            return Err(Error::dim(format!("expected a batch of inputs, got {:?}", x.shape())));
        }
        let outs = match *self.method() {
            MethodConfig::Deterministic => vec![self.pass(x, None, stream)],
            MethodConfig::Ensemble { members } => exec.map_range(members, |k| self.member_pass(x, k)),
            _ => exec.map_range(t, |i| self.pass(x, Some(i), stream)),
        };
        outs.into_iter().collect()
    }

    /// Mean and population variance over the passes of
    /// [`indexed_outputs`](Self::indexed_outputs).
    pub fn predictive_moments(
        &self,
        x: &Tensor,
        t: usize,
        stream: &RngStream,
        exec: Execution,
    ) -> Result<PredictiveSummary> {
        moments(&self.indexed_outputs(x, t, stream, exec)?)
    }

    /// Mean over passes of the softmax of the output logits, `[B, C]`.
    pub fn predictive_class_probabilities(
        &self,
        x: &Tensor,
        t: usize,
        stream: &RngStream,
        exec: Execution,
    ) -> Result<Tensor> {
        let outs = self.indexed_outputs(x, t, stream, exec)?;
        let first = &outs[0];
        if first.rank() != 2 {
            return Err(Error::dim(format!("expected logits [B, C], got {:?}", first.shape())));
        }
        let classes = first.shape()[1];
        let mut acc = vec![0.0; first.len()];
        for o in &outs {
            for (a, p) in acc.iter_mut().zip(softmax_rows(o.data(), classes)) {
                *a += p;
            }
        }
        let n = outs.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Tensor::new(first.shape().to_vec(), acc)
    }
}

/// Elementwise mean and population (divide-by-`T`) variance of equally
/// shaped samples.
pub fn moments(samples: &[Tensor]) -> Result<PredictiveSummary> {
    let first = samples.first().ok_or_else(|| Error::usage("no samples"))?;
    if samples.iter().any(|s| s.shape() != first.shape()) {
        return Err(Error::dim("samples differ in shape"));
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; first.len()];
    for s in samples {
        mean.iter_mut().zip(s.data()).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; first.len()];
    for s in samples {
        var.iter_mut()
            .zip(s.data())
            .zip(&mean)
            .for_each(|((acc, v), m)| *acc += (v - m) * (v - m));
    }
    var.iter_mut().for_each(|v| *v /= n);
    Ok(PredictiveSummary {
        mean: Tensor::new(first.shape().to_vec(), mean)?,
        variance: Tensor::new(first.shape().to_vec(), var)?,
        sample_count: samples.len(),
    })
}
