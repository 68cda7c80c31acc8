//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records each operation as it is evaluated. Calling
//! [`Tape::backward`] walks the records in reverse and accumulates exact
//! gradients for every node reachable from the output. Tapes are cheap and
//! meant to be rebuilt for every forward pass; they are not `Sync` by
//! intent, one tape belongs to one thread.

use super::kernels::{self, ConvGeometry};
use super::{sigmoid, softplus, Activation, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Affine { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, b: Var, geom: ConvGeometry, cols: Vec<f64> },
    Activation { x: Var, kind: Activation },
    Add(Var, Var),
    Mul(Var, Var),
    MulConst { x: Var, factor: Vec<f64> },
    Scale { x: Var, factor: f64 },
    Reshape(Var),
    Slice { src: Var, offset: usize },
    LinearMap { offset: Var, matrix: Var, z: Vec<f64> },
    Sum(Var),
    Mse { pred: Var, target: Vec<f64> },
    GaussianNll { pred: Var, target: Vec<f64> },
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    GaussianKl { mean: Var, rho: Var, prior_std: f64 },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Variance floor added to the softplus-transformed variance head.
pub const NLL_VARIANCE_FLOOR: f64 = 1e-6;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros (of `len`) if the output does not depend on it.
    pub fn wrt(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        value.ensure_finite(name)?;
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers an input or parameter. Its gradient buffer is not copied.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (batch, inputs, outputs) = kernels::affine_dims(xv.shape(), wv.shape(), bv.shape())?;
        let out = kernels::affine_forward(xv.data(), wv.data(), bv.data(), batch, inputs, outputs);
        self.push(
            Tensor::from_parts(vec![batch, outputs], out),
            Op::Affine { x, w, b },
            "affine",
        )
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(k), self.value(b));
        let geom = ConvGeometry::new(xv.shape(), kv.shape(), bv.shape(), stride, padding)?;
        let (out, cols) = kernels::conv_forward(&geom, xv.data(), kv.data(), bv.data(), true);
        self.push(
            Tensor::from_parts(geom.output_shape(), out),
            Op::Conv2d { x, k, b, geom, cols },
            "conv2d",
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        if kind == Activation::Identity {
            return Ok(x);
        }
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| kind.apply(v)).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(value, Op::Activation { x, kind }, "activation")
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(format!("{op}: shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(value, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(value, Op::Mul(a, b), "mul")
    }

    /// Elementwise product with a constant of the same shape (noise, masks).
    pub fn mul_const(&mut self, x: Var, factor: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != factor.shape() {
            return Err(Error::dim(format!(
                "mul_const: shapes {:?} and {:?} differ",
                xv.shape(),
                factor.shape()
            )));
        }
        let data = xv.data().iter().zip(factor.data()).map(|(a, b)| a * b).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(
            value,
            Op::MulConst { x, factor: factor.data().to_vec() },
            "mul_const",
        )
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * factor).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(value, Op::Scale { x, factor }, "scale")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push(value, Op::Reshape(x), "reshape")
    }

    /// A contiguous run of `src`'s flat values, viewed with `shape`.
    pub fn slice(&mut self, src: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let sv = self.value(src);
        if offset + n > sv.len() || n == 0 {
            return Err(Error::dim(format!(
                "slice [{offset}, {}) out of {} values",
                offset + n,
                sv.len()
            )));
        }
        let value = Tensor::from_parts(shape.to_vec(), sv.data()[offset..offset + n].to_vec());
        self.push(value, Op::Slice { src, offset }, "slice")
    }

    /// `offset + matrix * z` for `offset: [P]`, `matrix: [P, d]` and a constant `z: [d]`.
    pub fn linear_map(&mut self, offset: Var, matrix: Var, z: &[f64]) -> Result<Var> {
        let (ov, mv) = (self.value(offset), self.value(matrix));
        let p = ov.len();
        if ov.rank() != 1 || mv.shape() != [p, z.len()] {
            return Err(Error::dim(format!(
                "linear_map expects offset [P], matrix [P, {}]; got {:?}, {:?}",
                z.len(),
                ov.shape(),
                mv.shape()
            )));
        }
        let d = z.len();
        let data = ov
            .data()
            .iter()
            .zip(mv.data().chunks_exact(d))
            .map(|(a, row)| a + row.iter().zip(z).map(|(b, zj)| b * zj).sum::<f64>())
            .collect();
        let value = Tensor::from_parts(vec![p], data);
        self.push(
            value,
            Op::LinearMap { offset, matrix, z: z.to_vec() },
            "linear_map",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), "sum")
    }

    /// Mean squared error over all entries.
    pub fn mse(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() {
            return Err(Error::dim(format!(
                "mse: prediction {:?} vs target {:?}",
                pv.shape(),
                target.shape()
            )));
        }
        let n = pv.len() as f64;
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t).powi(2))
            .sum::<f64>()
            / n;
        self.push(
            Tensor::scalar(loss),
            Op::Mse { pred, target: target.data().to_vec() },
            "mse",
        )
    }

    /// Heteroscedastic Gaussian negative log-likelihood, averaged over rows.
    /// `pred: [B, 2]` holds a mean and a raw scale mapped through softplus.
    pub fn gaussian_nll(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let pv = self.value(pred);
        let b = pv.rows();
        if pv.shape() != [b, 2] || target.len() != b {
            return Err(Error::dim(format!(
                "gaussian_nll expects pred [B, 2] and B targets; got {:?}, {:?}",
                pv.shape(),
                target.shape()
            )));
        }
        let mut loss = 0.0;
        for (row, &y) in pv.data().chunks_exact(2).zip(target.data()) {
            let var = softplus(row[1]) + NLL_VARIANCE_FLOOR;
            loss += 0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (y - row[0]).powi(2) / var);
        }
        self.push(
            Tensor::scalar(loss / b as f64),
            Op::GaussianNll { pred, target: target.data().to_vec() },
            "gaussian_nll",
        )
    }

    /// Mean softmax cross-entropy of `logits: [B, C]` against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let b = lv.rows();
        if lv.rank() != 2 || labels.len() != b {
            return Err(Error::dim(format!(
                "cross entropy expects logits [B, C] and B labels; got {:?}, {}",
                lv.shape(),
                labels.len()
            )));
        }
        let c = lv.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::dim(format!("label {bad} out of {c} classes")));
        }
        let probs = softmax_rows(lv.data(), c);
        let loss = probs
            .chunks_exact(c)
            .zip(labels)
            .map(|(p, &l)| -p[l].max(f64::MIN_POSITIVE).ln())
            .sum::<f64>()
            / b as f64;
        self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec(), probs },
            "softmax_cross_entropy",
        )
    }

    /// Closed-form `sum_i KL(N(mean_i, softplus(rho_i)^2) || N(0, prior_std^2))`.
    pub fn gaussian_kl(&mut self, mean: Var, rho: Var, prior_std: f64) -> Result<Var> {
        self.same_shape(mean, rho, "gaussian_kl")?;
        let kl = gaussian_kl_value(self.value(mean).data(), self.value(rho).data(), prior_std);
        self.push(
            Tensor::scalar(kl),
            Op::GaussianKl { mean, rho, prior_std },
            "gaussian_kl",
        )
    }

    /// Gradients of a scalar output with respect to every node.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.value(output).shape()
            )));
        }
        self.backward_with_seed(output, vec![1.0])
    }

    /// Vector-Jacobian product: gradients of `sum(seed * output)`.
    pub fn backward_with_seed(&self, output: Var, seed: Vec<f64>) -> Result<Gradients> {
        if seed.len() != self.value(output).len() {
            return Err(Error::dim("backward seed does not match output size"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (batch, inputs) = (xv.shape()[0], xv.shape()[1]);
                let outputs = wv.shape()[0];
                let (dx, dw, db) =
                    kernels::affine_backward(g, xv.data(), wv.data(), batch, inputs, outputs);
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
                accumulate(grads, *b, db);
            }
            Op::Conv2d { x, k, b, geom, cols } => {
                let (dx, dk, db) = kernels::conv_backward(geom, g, cols, self.value(*k).data());
                accumulate(grads, *x, dx);
                accumulate(grads, *k, dk);
                accumulate(grads, *b, db);
            }
            Op::Activation { x, kind } => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(node.value.data())
                    .zip(g)
                    .map(|((&a, &y), gi)| gi * kind.derivative(a, y))
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                accumulate(grads, *a, g.iter().zip(bv).map(|(gi, v)| gi * v).collect());
                accumulate(grads, *b, g.iter().zip(av).map(|(gi, v)| gi * v).collect());
            }
            Op::MulConst { x, factor } => {
                accumulate(grads, *x, g.iter().zip(factor).map(|(gi, f)| gi * f).collect());
            }
            Op::Scale { x, factor } => {
                accumulate(grads, *x, g.iter().map(|gi| gi * factor).collect());
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::Slice { src, offset } => {
                let n = self.value(*src).len();
                let slot = grads[src.0].get_or_insert_with(|| vec![0.0; n]);
                for (acc, gi) in slot[*offset..*offset + g.len()].iter_mut().zip(g) {
                    *acc += gi;
                }
            }
            Op::LinearMap { offset, matrix, z } => {
                accumulate(grads, *offset, g.to_vec());
                let dm = g
                    .iter()
                    .flat_map(|gi| z.iter().map(move |zj| gi * zj))
                    .collect();
                accumulate(grads, *matrix, dm);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mse { pred, target } => {
                let pv = self.value(*pred).data();
                let scale = 2.0 * g[0] / pv.len() as f64;
                let d = pv.iter().zip(target).map(|(p, t)| scale * (p - t)).collect();
                accumulate(grads, *pred, d);
            }
            Op::GaussianNll { pred, target } => {
                let pv = self.value(*pred).data();
                let scale = g[0] / target.len() as f64;
                let mut d = Vec::with_capacity(pv.len());
                for (row, &y) in pv.chunks_exact(2).zip(target) {
                    let var = softplus(row[1]) + NLL_VARIANCE_FLOOR;
                    let r = y - row[0];
                    d.push(-scale * r / var);
                    d.push(scale * 0.5 * (1.0 / var - r * r / (var * var)) * sigmoid(row[1]));
                }
                accumulate(grads, *pred, d);
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let c = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &l) in d.chunks_exact_mut(c).zip(labels) {
                    row[l] -= scale;
                }
                accumulate(grads, *logits, d);
            }
            Op::GaussianKl { mean, rho, prior_std } => {
                let p2 = prior_std * prior_std;
                let mv = self.value(*mean).data();
                let rv = self.value(*rho).data();
                accumulate(grads, *mean, mv.iter().map(|m| g[0] * m / p2).collect());
                let d = rv
                    .iter()
                    .map(|&r| {
                        let s = softplus(r);
                        g[0] * (-1.0 / s + s / p2) * sigmoid(r)
                    })
                    .collect();
                accumulate(grads, *rho, d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contribution: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (a, c) in existing.iter_mut().zip(&contribution) {
                *a += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

/// Row-wise softmax of a `[rows, classes]` buffer.
pub(crate) fn softmax_rows(logits: &[f64], classes: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(logits.len());
    for row in logits.chunks_exact(classes) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for p in &mut out[start..] {
            *p /= total;
        }
    }
    out
}

pub(crate) fn gaussian_kl_value(mean: &[f64], rho: &[f64], prior_std: f64) -> f64 {
    let p2 = prior_std * prior_std;
    mean.iter()
        .zip(rho)
        .map(|(&m, &r)| {
            let s = softplus(r);
            (prior_std / s).ln() + (s * s + m * m) / (2.0 * p2) - 0.5
        })
        .sum()
}
