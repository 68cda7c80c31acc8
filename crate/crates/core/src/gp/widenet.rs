//! Monte Carlo estimates of the output covariance of finite random ReLU
//! networks, used to validate the analytic kernel.
//!
//! Given the previous layer's activations, the pre-activations of the next
//! layer at two inputs are i.i.d. (over units) bivariate normal with
//! covariance `sb2 + sw2 / width * sum_i phi_i(x) phi_i(x')`. Sampling units
//! from that law is therefore exact in distribution for Gaussian weights and
//! biases while costing O(width) per layer instead of O(width^2). The
//! random readout layer is integrated out analytically: each network
//! contributes the conditional covariance of its output given its last
//! hidden layer, whose expectation over networks is the output covariance.

use rand::Rng;
use rand_distr::StandardNormal;

use super::NngpConfig;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::tensor::{standard_normal_vec, RngStream};

const NETS_PER_CHUNK: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct WideNetEstimate {
    /// `[k11, k12, k22]` of the output of a network with `l + 1` hidden
    /// layers at index `l`, for `l < cfg.depth`.
    pub covariances: Vec<[f64; 3]>,
    pub width: usize,
    pub nets: usize,
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

fn base(a: &[f64], b: &[f64], cfg: &NngpConfig) -> [f64; 3] {
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
    let d = cfg.input_dim as f64;
    [
        cfg.bias_variance + cfg.weight_variance * dot(a, a) / d,
        cfg.bias_variance + cfg.weight_variance * dot(a, b) / d,
        cfg.bias_variance + cfg.weight_variance * dot(b, b) / d,
    ]
}

/// Runs one random network and accumulates its per-depth conditional
/// output covariances into `acc`.
fn one_network<R: Rng>(k0: [f64; 3], cfg: &NngpConfig, width: usize, rng: &mut R, acc: &mut [[f64; 3]]) {
    let mut k = k0;
    for slot in acc.iter_mut() {
        let l11 = k[0].max(0.0).sqrt();
        let l21 = if l11 > 0.0 { k[1] / l11 } else { 0.0 };
        let l22 = (k[2] - l21 * l21).max(0.0).sqrt();
        let (mut s11, mut s12, mut s22) = (0.0, 0.0, 0.0);
        for _ in 0..width {
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            let p1 = relu(l11 * z1);
            let p2 = relu(l21 * z1 + l22 * z2);
            s11 += p1 * p1;
            s12 += p1 * p2;
            s22 += p2 * p2;
        }
        let scale = cfg.weight_variance / width as f64;
        k = [
            cfg.bias_variance + scale * s11,
            cfg.bias_variance + scale * s12,
            cfg.bias_variance + scale * s22,
        ];
        for (s, v) in slot.iter_mut().zip(k) {
            *s += v;
        }
    }
}

/// Output covariance of `nets` random ReLU networks of the given width at
/// inputs `a` and `b`, for every depth up to `cfg.depth`.
pub fn wide_network_covariance(
    a: &[f64],
    b: &[f64],
    cfg: &NngpConfig,
    width: usize,
    nets: usize,
    stream: &RngStream,
    exec: Execution,
) -> Result<WideNetEstimate> {
    cfg.validate()?;
    if a.len() != cfg.input_dim || b.len() != cfg.input_dim {
        return Err(Error::dim("inputs do not match the configured input dimension"));
    }
    if width == 0 || nets == 0 {
        return Err(Error::usage("width and network count must be positive"));
    }
    let k0 = base(a, b, cfg);
    let chunks = nets.div_ceil(NETS_PER_CHUNK);
    let partials = exec.map_range(chunks, |c| {
        let mut rng = stream.child("chunk", c as u64).rng();
        let mut acc = vec![[0.0; 3]; cfg.depth];
        let count = NETS_PER_CHUNK.min(nets - c * NETS_PER_CHUNK);
        for _ in 0..count {
            one_network(k0, cfg, width, &mut rng, &mut acc);
        }
        acc
    });
    let mut total = vec![[0.0; 3]; cfg.depth];
    for part in partials {
        for (t, p) in total.iter_mut().zip(part) {
            for (x, y) in t.iter_mut().zip(p) {
                *x += y;
            }
        }
    }
    for t in &mut total {
        t.iter_mut().for_each(|v| *v /= nets as f64);
    }
    Ok(WideNetEstimate { covariances: total, width, nets })
}

/// Empirical output covariance of `nets` explicitly instantiated networks
/// (dense Gaussian weight matrices, a readout after every hidden layer).
/// Quadratic in `width`; meant for small cross-checks.
pub fn explicit_network_covariance(
    a: &[f64],
    b: &[f64],
    cfg: &NngpConfig,
    width: usize,
    nets: usize,
    stream: &RngStream,
) -> Result<Vec<[f64; 3]>> {
    cfg.validate()?;
    if a.len() != cfg.input_dim || b.len() != cfg.input_dim {
        return Err(Error::dim("inputs do not match the configured input dimension"));
    }
    let (sw, sb) = (cfg.weight_variance.sqrt(), cfg.bias_variance.sqrt());
    let mut sums = vec![[0.0; 3]; cfg.depth];
    let mut means = vec![[0.0; 2]; cfg.depth];
    for n in 0..nets {
        let mut rng = stream.child("net", n as u64).rng();
        let mut h = [a.to_vec(), b.to_vec()];
        for l in 0..cfg.depth {
            let fan_in = h[0].len();
            let w = standard_normal_vec(&mut rng, width * fan_in);
            let bias = standard_normal_vec(&mut rng, width);
            let scale = sw / (fan_in as f64).sqrt();
            let next = h.clone().map(|x| {
                (0..width)
                    .map(|j| {
                        let pre = sb * bias[j]
                            + scale * w[j * fan_in..(j + 1) * fan_in].iter().zip(&x).map(|(w, x)| w * x).sum::<f64>();
                        relu(pre)
                    })
                    .collect::<Vec<f64>>()
            });
            let v = standard_normal_vec(&mut rng, width);
            let c: f64 = rng.sample(StandardNormal);
            let out_scale = sw / (width as f64).sqrt();
            let f = next.clone().map(|p| sb * c + out_scale * v.iter().zip(&p).map(|(v, p)| v * p).sum::<f64>());
            sums[l][0] += f[0] * f[0];
            sums[l][1] += f[0] * f[1];
            sums[l][2] += f[1] * f[1];
            means[l][0] += f[0];
            means[l][1] += f[1];
            h = next;
        }
    }
    let n = nets as f64;
    Ok(sums
        .into_iter()
        .zip(means)
        .map(|(s, m)| {
            let (m1, m2) = (m[0] / n, m[1] / n);
            [s[0] / n - m1 * m1, s[1] / n - m1 * m2, s[2] / n - m2 * m2]
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::kernel_trace;

    #[test]
    fn estimator_is_close_at_moderate_width() {
        let cfg = NngpConfig { input_dim: 3, ..Default::default() };
        let (a, b) = ([0.3, -1.2, 0.8], [1.1, 0.4, -0.5]);
        let est = wide_network_covariance(&a, &b, &cfg, 512, 200, &RngStream::new(1), Execution::Sequential)
            .unwrap();
        let exact = kernel_trace(&a, &b, &cfg);
        for l in 0..cfg.depth {
            for e in 0..3 {
                let rel = (est.covariances[l][e] - exact[l + 1][e]).abs() / exact[l + 1][e].abs();
                assert!(rel < 0.05, "depth {} entry {e}: {rel}", l + 1);
            }
        }
    }

    #[test]
    fn chunking_does_not_depend_on_mode() {
        let cfg = NngpConfig { input_dim: 2, ..Default::default() };
        let s = RngStream::new(2);
        let a = wide_network_covariance(&[1.0, 0.0], &[0.0, 1.0], &cfg, 16, 130, &s, Execution::Sequential).unwrap();
        let b = wide_network_covariance(&[1.0, 0.0], &[0.0, 1.0], &cfg, 16, 130, &s, Execution::default()).unwrap();
        assert_eq!(a, b);
    }
}
