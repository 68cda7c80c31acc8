//! Deterministic and stochastic layer primitives.
//!
//! Each stochastic layer takes its noise explicitly (an `eps`, `z` or mask
//! tensor) so a forward pass is a pure function of parameters, input and
//! noise. The `*_on_tape` forms are what networks use; the value-level
//! functions wrap them for direct use and testing.
//!
//! A variational layer computes
//! `act_out(act_mu(L(x; mu)) + act_sigma(L(x; sigma)) * eps)` where `L` is a
//! dense or convolutional map. The sigma branch output is a standard
//! deviation; its sign is irrelevant in distribution because `eps` is
//! symmetric.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{softplus, Activation, RngStream, Tape, Tensor, Var};

/// How a sub-layer maps its input: `x W^T + b` or a 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LinearOp {
    Dense,
    Conv { stride: usize, padding: usize },
}

impl LinearOp {
    pub fn apply(self, tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
        match self {
            LinearOp::Dense => tape.affine(x, w, b),
            LinearOp::Conv { stride, padding } => tape.conv2d(x, w, b, stride, padding),
        }
    }
}

/// Weight and bias of a sub-layer together with the map they parametrize.
pub trait Linear {
    fn op(&self) -> LinearOp;
    fn weight(&self) -> &Tensor;
    fn bias(&self) -> &Tensor;
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

impl DenseParams {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        match (weight.shape(), bias.shape()) {
            ([o, _], [ob]) if o == ob => Ok(Self { weight, bias }),
            (w, b) => Err(Error::dim(format!("dense params W {w:?}, b {b:?}"))),
        }
    }
}

impl Linear for DenseParams {
    fn op(&self) -> LinearOp {
        LinearOp::Dense
    }
    fn weight(&self) -> &Tensor {
        &self.weight
    }
    fn bias(&self) -> &Tensor {
        &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `[filters, channels, kh, kw]`
    pub weight: Tensor,
    /// `[filters]`
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Linear for ConvParams {
    fn op(&self) -> LinearOp {
        LinearOp::Conv { stride: self.stride, padding: self.padding }
    }
    fn weight(&self) -> &Tensor {
        &self.weight
    }
    fn bias(&self) -> &Tensor {
        &self.bias
    }
}

/// The three activation slots of a variational layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariationalActivations {
    pub mu: Activation,
    pub sigma: Activation,
    pub out: Activation,
}

impl VariationalActivations {
    /// Identity inner activations, the given nonlinearity on the sample.
    pub fn epistemic(out: Activation) -> Self {
        Self { mu: Activation::Identity, sigma: Activation::Identity, out }
    }
}

/// Paired mean / standard-deviation sub-layers of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalParams<P> {
    pub mu: P,
    pub sigma: P,
    pub activations: VariationalActivations,
}

pub type VariationalDenseParams = VariationalParams<DenseParams>;
pub type VariationalConvParams = VariationalParams<ConvParams>;

impl<P: Linear> VariationalParams<P> {
    pub fn new(mu: P, sigma: P, activations: VariationalActivations) -> Result<Self> {
        if mu.weight().shape() != sigma.weight().shape()
            || mu.bias().shape() != sigma.bias().shape()
            || mu.op() != sigma.op()
        {
            return Err(Error::dim("variational mu and sigma sub-layers differ in shape"));
        }
        Ok(Self { mu, sigma, activations })
    }
}

/// Gaussian weight posterior of a Bayes-by-backprop layer; the standard
/// deviation is `softplus(rho)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BbbParams<P> {
    pub mean: P,
    pub rho: P,
    pub prior_std: f64,
}

pub type BbbDenseParams = BbbParams<DenseParams>;
pub type BbbConvParams = BbbParams<ConvParams>;

impl<P: Linear> BbbParams<P> {
    pub fn new(mean: P, rho: P, prior_std: f64) -> Result<Self> {
        if !(prior_std > 0.0 && prior_std.is_finite()) {
            return Err(Error::Config(format!("prior_std must be positive, got {prior_std}")));
        }
        if mean.weight().shape() != rho.weight().shape() || mean.bias().shape() != rho.bias().shape()
        {
            return Err(Error::dim("bbb mean and rho differ in shape"));
        }
        Ok(Self { mean, rho, prior_std })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    rate: f64,
}

impl DropoutConfig {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        Ok(Self { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Binary keep-mask, each entry 1 with probability `1 - p`.
    pub fn sample_mask<R: Rng + ?Sized>(&self, shape: &[usize], rng: &mut R) -> Tensor {
        let keep = 1.0 - self.rate;
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 } else { 0.0 })
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// The multiplier applied to activations: `mask / (1 - p)`.
    pub fn scaled_mask<R: Rng + ?Sized>(&self, shape: &[usize], rng: &mut R) -> Tensor {
        let scale = 1.0 / (1.0 - self.rate);
        let mut mask = self.sample_mask(shape, rng);
        mask.data_mut().iter_mut().for_each(|m| *m *= scale);
        mask
    }
}

pub fn variational_on_tape(
    tape: &mut Tape,
    op: LinearOp,
    x: Var,
    [w_mu, b_mu, w_sigma, b_sigma]: [Var; 4],
    acts: VariationalActivations,
    eps: &Tensor,
) -> Result<Var> {
    let m = op.apply(tape, x, w_mu, b_mu)?;
    let m = tape.activation(m, acts.mu)?;
    let s = op.apply(tape, x, w_sigma, b_sigma)?;
    let s = tape.activation(s, acts.sigma)?;
    let noise = tape.mul_const(s, eps)?;
    let f = tape.add(m, noise)?;
    tape.activation(f, acts.out)
}

/// Samples `W = mean_W + softplus(rho_W) * z_W` (likewise `b`) and applies it.
pub fn bbb_on_tape(
    tape: &mut Tape,
    op: LinearOp,
    x: Var,
    [w_mean, b_mean, w_rho, b_rho]: [Var; 4],
    z_w: &Tensor,
    z_b: &Tensor,
) -> Result<Var> {
    let w = reparametrize(tape, w_mean, w_rho, z_w)?;
    let b = reparametrize(tape, b_mean, b_rho, z_b)?;
    op.apply(tape, x, w, b)
}

fn reparametrize(tape: &mut Tape, mean: Var, rho: Var, z: &Tensor) -> Result<Var> {
    let std = tape.activation(rho, Activation::Softplus)?;
    let noise = tape.mul_const(std, z)?;
    tape.add(mean, noise)
}

/// Closed-form KL of both the weight and bias posteriors to the prior.
pub fn bbb_kl_on_tape(tape: &mut Tape, [w_mean, b_mean, w_rho, b_rho]: [Var; 4], prior_std: f64) -> Result<Var> {
    let kw = tape.gaussian_kl(w_mean, w_rho, prior_std)?;
    let kb = tape.gaussian_kl(b_mean, b_rho, prior_std)?;
    tape.add(kw, kb)
}

fn leaves<P: Linear>(tape: &mut Tape, a: &P, b: &P) -> [Var; 4] {
    [
        tape.leaf(a.weight()),
        tape.leaf(a.bias()),
        tape.leaf(b.weight()),
        tape.leaf(b.bias()),
    ]
}

fn variational_forward<P: Linear>(x: &Tensor, params: &VariationalParams<P>, eps: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let vars = leaves(&mut tape, &params.mu, &params.sigma);
    let out = variational_on_tape(&mut tape, params.mu.op(), xv, vars, params.activations, eps)?;
    Ok(tape.value(out).clone())
}

/// `act_out(act_mu(x W_mu^T + b_mu) + act_sigma(x W_sigma^T + b_sigma) * eps)`
/// with `eps: [B, O]`.
pub fn variational_dense_forward(x: &Tensor, params: &VariationalDenseParams, eps: &Tensor) -> Result<Tensor> {
    variational_forward(x, params, eps)
}

/// Convolutional variational layer; `eps` has the convolution's output shape.
pub fn variational_conv_forward(x: &Tensor, params: &VariationalConvParams, eps: &Tensor) -> Result<Tensor> {
    variational_forward(x, params, eps)
}

/// One weight draw shared across the whole batch.
pub fn bbb_dense_forward(x: &Tensor, params: &BbbDenseParams, z_w: &Tensor, z_b: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x);
    let vars = leaves(&mut tape, &params.mean, &params.rho);
    let out = bbb_on_tape(&mut tape, LinearOp::Dense, xv, vars, z_w, z_b)?;
    Ok(tape.value(out).clone())
}

/// `sum_i KL(N(mu_i, sigma_i^2) || N(0, prior_std^2))` over weights and biases.
pub fn bbb_kl_to_prior<P: Linear>(params: &BbbParams<P>) -> f64 {
    let p = params.prior_std;
    let term = |m: f64, r: f64| {
        let s = softplus(r);
        (p / s).ln() + (s * s + m * m) / (2.0 * p * p) - 0.5
    };
    let sum = |mean: &Tensor, rho: &Tensor| -> f64 {
        mean.data().iter().zip(rho.data()).map(|(&m, &r)| term(m, r)).sum()
    };
    sum(params.mean.weight(), params.rho.weight()) + sum(params.mean.bias(), params.rho.bias())
}

/// Inverted dropout with a freshly sampled mask, applied at train and
/// prediction time alike.
pub fn dropout_forward(x: &Tensor, cfg: &DropoutConfig, rng: &RngStream) -> Result<Tensor> {
    let mask = cfg.sample_mask(x.shape(), &mut rng.rng());
    dropout_with_mask(x, &mask, cfg)
}

/// `x * mask / (1 - p)` for a given binary mask.
pub fn dropout_with_mask(x: &Tensor, mask: &Tensor, cfg: &DropoutConfig) -> Result<Tensor> {
    if x.shape() != mask.shape() {
        return Err(Error::dim("dropout mask shape differs from input"));
    }
    let scale = 1.0 / (1.0 - cfg.rate);
    let data = x.data().iter().zip(mask.data()).map(|(a, m)| a * m * scale).collect();
    Ok(Tensor::from_parts(x.shape().to_vec(), data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{affine, sample_standard_normal};

    fn randn(shape: &[usize], i: u64) -> Tensor {
        sample_standard_normal(shape, &RngStream::new(5).child("layers", i))
    }

    fn dense(o: usize, i: usize, k: u64) -> DenseParams {
        DenseParams::new(randn(&[o, i], k), randn(&[o], k + 1000)).unwrap()
    }

    fn zero_dense(o: usize, i: usize) -> DenseParams {
        DenseParams::new(Tensor::zeros(&[o, i]), Tensor::zeros(&[o])).unwrap()
    }

    #[test]
    fn zero_sigma_collapses_to_mean_branch() {
        let x = randn(&[4, 3], 1);
        let mu = dense(2, 3, 2);
        let params = VariationalParams::new(
            mu.clone(),
            zero_dense(2, 3),
            VariationalActivations::epistemic(Activation::Identity),
        )
        .unwrap();
        let eps = randn(&[4, 2], 3);
        let out = variational_dense_forward(&x, &params, &eps).unwrap();
        assert_eq!(out, affine(&x, &mu.weight, &mu.bias).unwrap());
    }

    #[test]
    fn zero_eps_is_the_mean_pass() {
        let x = randn(&[2, 3], 4);
        let acts = VariationalActivations {
            mu: Activation::Tanh,
            sigma: Activation::Softplus,
            out: Activation::Relu,
        };
        let params = VariationalParams::new(dense(5, 3, 5), dense(5, 3, 6), acts).unwrap();
        let out = variational_dense_forward(&x, &params, &Tensor::zeros(&[2, 5])).unwrap();
        let m = affine(&x, &params.mu.weight, &params.mu.bias).unwrap();
        let expected: Vec<f64> = m.data().iter().map(|v| v.tanh().max(0.0)).collect();
        assert_eq!(out.data(), expected.as_slice());
    }

    #[test]
    fn eps_shape_is_checked() {
        let params = VariationalParams::new(
            dense(2, 3, 7),
            dense(2, 3, 8),
            VariationalActivations::epistemic(Activation::Identity),
        )
        .unwrap();
        let err = variational_dense_forward(&randn(&[4, 3], 9), &params, &Tensor::zeros(&[4, 3]));
        assert!(matches!(err, Err(Error::Dimension(_))));
        assert!(VariationalParams::new(
            dense(2, 3, 7),
            dense(3, 3, 8),
            VariationalActivations::epistemic(Activation::Identity)
        )
        .is_err());
    }

    #[test]
    fn bbb_at_zero_noise_or_tiny_scale_is_the_mean_layer() {
        let x = randn(&[3, 4], 10);
        let mean = dense(2, 4, 11);
        let det = affine(&x, &mean.weight, &mean.bias).unwrap();
        let rho = dense(2, 4, 12);
        let params = BbbParams::new(mean.clone(), rho, 1.0).unwrap();
        let out = bbb_dense_forward(&x, &params, &Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2]))
            .unwrap();
        assert_eq!(out, det);

        let rho = DenseParams::new(Tensor::full(&[2, 4], -40.0), Tensor::full(&[2], -40.0)).unwrap();
        let params = BbbParams::new(mean, rho, 1.0).unwrap();
        let out = bbb_dense_forward(&x, &params, &randn(&[2, 4], 13), &randn(&[2], 14)).unwrap();
        for (a, b) in out.data().iter().zip(det.data()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn kl_closed_form_values() {
        let prior: f64 = 0.8;
        let rho_val = crate::tensor::softplus_inverse(prior);
        let at = |m: f64| {
            BbbParams::new(
                DenseParams::new(Tensor::full(&[1, 1], m), Tensor::zeros(&[1])).unwrap(),
                DenseParams::new(Tensor::full(&[1, 1], rho_val), Tensor::full(&[1], rho_val))
                    .unwrap(),
                prior,
            )
            .unwrap()
        };
        assert!(bbb_kl_to_prior(&at(0.0)).abs() < 1e-12);
        // weight mean = prior_std contributes mu^2 / (2 prior^2) = 0.5; bias term is zero
        assert!((bbb_kl_to_prior(&at(prior)) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn dropout_edge_cases() {
        let x = randn(&[3, 4], 20);
        let cfg = DropoutConfig::new(0.0).unwrap();
        assert_eq!(dropout_forward(&x, &cfg, &RngStream::new(1)).unwrap(), x);
        assert!(matches!(DropoutConfig::new(1.0), Err(Error::Config(_))));
        assert!(DropoutConfig::new(-0.1).is_err());

        let cfg = DropoutConfig::new(0.25).unwrap();
        let ones = Tensor::full(x.shape(), 1.0);
        let out = dropout_with_mask(&x, &ones, &cfg).unwrap();
        for (o, v) in out.data().iter().zip(x.data()) {
            assert!((o - v / 0.75).abs() < 1e-15);
        }
    }
}
