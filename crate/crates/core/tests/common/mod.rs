//! Independent reference implementations used as test oracles. Nothing here
//! calls into the library except to build inputs.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use varnet::tensor::{finite_difference_gradient, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(r: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

pub fn random_tensor(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform_vec(r, n, -1.0, 1.0)).unwrap()
}

pub fn normal(r: &mut impl Rng) -> f64 {
    // Box-Muller, so the oracle does not share the library's sampler
    let u1: f64 = 1.0 - r.random::<f64>();
    let u2: f64 = r.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// `out[n][o] = sum_i w[o][i] x[n][i] + b[o]` by plain loops.
pub fn naive_affine(x: &[f64], w: &[f64], b: &[f64], batch: usize, inp: usize, out: usize) -> Vec<f64> {
    let mut y = vec![0.0; batch * out];
    for n in 0..batch {
        for o in 0..out {
            let mut s = b[o];
            for i in 0..inp {
                s += w[o * inp + i] * x[n * inp + i];
            }
            y[n * out + o] = s;
        }
    }
    y
}

/// Cross-correlation with zero padding, by explicit loops over every index.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv(
    x: &[f64],
    [bn, c, h, w]: [usize; 4],
    k: &[f64],
    [f, _, kh, kw]: [usize; 4],
    bias: &[f64],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut y = vec![0.0; bn * f * ho * wo];
    for n in 0..bn {
        for fo in 0..f {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = bias[fo];
                    for ch in 0..c {
                        for u in 0..kh {
                            for v in 0..kw {
                                let r = (i * stride + u) as isize - pad as isize;
                                let q = (j * stride + v) as isize - pad as isize;
                                if r < 0 || q < 0 || r >= h as isize || q >= w as isize {
                                    continue;
                                }
                                let xi = ((n * c + ch) * h + r as usize) * w + q as usize;
                                let ki = ((fo * c + ch) * kh + u) * kw + v;
                                s += x[xi] * k[ki];
                            }
                        }
                    }
                    y[((n * f + fo) * ho + i) * wo + j] = s;
                }
            }
        }
    }
    (y, [bn, f, ho, wo])
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn gauss_jordan_inverse(m: &[Vec<f64>]) -> Vec<Vec<f64>> {
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
        let p = (col..n).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
        a.swap(col, p);
        let d = a[col][col];
        assert!(d.abs() > 1e-300, "singular matrix");
        a[col].iter_mut().for_each(|v| *v /= d);
        for r in 0..n {
            if r != col {
                let f = a[r][col];
                if f != 0.0 {
                    let pivot = a[col].clone();
                    a[r].iter_mut().zip(&pivot).for_each(|(v, p)| *v -= f * p);
                }
            }
        }
    }
    a.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// NNGP kernel of a ReLU network, one pair of inputs at a time, written
/// from the arc-cosine formula.
pub fn pair_kernel(a: &[f64], b: &[f64], depth: usize, sw2: f64, sb2: f64) -> f64 {
    let d = a.len() as f64;
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| p * q).sum::<f64>();
    let mut kaa = sb2 + sw2 * dot(a, a) / d;
    let mut kbb = sb2 + sw2 * dot(b, b) / d;
    let mut kab = sb2 + sw2 * dot(a, b) / d;
    for _ in 0..depth {
        let norm = (kaa * kbb).sqrt();
        let t = (kab / norm).clamp(-1.0, 1.0).acos();
        let pi = std::f64::consts::PI;
        kab = sb2 + sw2 / (2.0 * pi) * norm * (t.sin() + (pi - t) * t.cos());
        kaa = sb2 + sw2 / 2.0 * kaa;
        kbb = sb2 + sw2 / 2.0 * kbb;
    }
    kab
}

/// `(mean, covariance)` of the GP posterior by explicit matrix inversion.
pub fn naive_gp_posterior(
    xtr: &[Vec<f64>],
    y: &[f64],
    xte: &[Vec<f64>],
    noise: f64,
    depth: usize,
    sw2: f64,
    sb2: f64,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let k = |a: &[f64], b: &[f64]| pair_kernel(a, b, depth, sw2, sb2);
    let kxx: Vec<Vec<f64>> = xtr
        .iter()
        .enumerate()
        .map(|(i, a)| xtr.iter().enumerate().map(|(j, b)| k(a, b) + if i == j { noise } else { 0.0 }).collect())
        .collect();
    let inv = gauss_jordan_inverse(&kxx);
    let ks: Vec<Vec<f64>> = xte.iter().map(|t| xtr.iter().map(|a| k(a, t)).collect()).collect();
    let n = xtr.len();
    let w: Vec<Vec<f64>> = ks
        .iter()
        .map(|row| (0..n).map(|j| (0..n).map(|i| row[i] * inv[i][j]).sum()).collect())
        .collect();
    let mean = w.iter().map(|wr| wr.iter().zip(y).map(|(a, b)| a * b).sum()).collect();
    let cov = xte
        .iter()
        .enumerate()
        .map(|(p, tp)| {
            xte.iter()
                .enumerate()
                .map(|(q, tq)| k(tp, tq) - (0..n).map(|i| w[p][i] * ks[q][i]).sum::<f64>())
                .collect()
        })
        .collect();
    (mean, cov)
}

/// Composite Simpson's rule on `[a, b]` with `n` (even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// `KL(N(m1, v1) || N(m2, v2))` as `∫ p log(p / q)` by quadrature over
/// twelve standard deviations of `p`.
pub fn kl_by_quadrature(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
    let logpdf = |x: f64, m: f64, v: f64| -0.5 * ((x - m).powi(2) / v + (2.0 * std::f64::consts::PI * v).ln());
    let s = v1.sqrt();
    simpson(
        |x| {
            let lp = logpdf(x, m1, v1);
            lp.exp() * (lp - logpdf(x, m2, v2))
        },
        m1 - 12.0 * s,
        m1 + 12.0 * s,
        20_000,
    )
}

/// Mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `|a - b| / max(|a|, |b|, floor)`, worst over the slices.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Compares tape gradients of `sum(build(inputs) * r)` (fixed random `r`)
/// with central differences over every input entry. Returns
/// `||g - fd|| / max(||g||, ||fd||, 1e-12)`.
pub fn gradient_error<F>(inputs: &[Tensor], seed: u64, build: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |ts: &[Tensor]| -> (Tape, Var, Vec<Var>) {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = ts.iter().map(|t| tape.leaf(t)).collect();
        let out = build(&mut tape, &leaves);
        (tape, out, leaves)
    };
    let (tape, out, _) = eval(inputs);
    let weights = random_tensor(&mut rng(seed), tape.value(out).shape());
    let project = |ts: &[Tensor]| -> (Tape, Var, Vec<Var>) {
        let (mut tape, out, leaves) = eval(ts);
        let p = tape.mul_const(out, &weights).unwrap();
        let s = tape.sum(p).unwrap();
        (tape, s, leaves)
    };
    let (tape, loss, leaves) = project(inputs);
    let grads = tape.backward(loss).unwrap();
    let analytic: Vec<f64> = leaves
        .iter()
        .zip(inputs)
        .flat_map(|(v, t)| grads.wrt(*v, t.len()))
        .collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let numeric = finite_difference_gradient(
        |theta| {
            let mut off = 0;
            let ts: Vec<Tensor> = inputs
                .iter()
                .map(|t| {
                    let d = theta[off..off + t.len()].to_vec();
                    off += t.len();
                    Tensor::new(t.shape().to_vec(), d).unwrap()
                })
                .collect();
            let (tape, loss, _) = project(&ts);
            tape.value(loss).data()[0]
        },
        &flat,
        1e-5,
    );
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-12)
}

/// Directory holding the MNIST IDX files: `$VARNET_DATA_DIR`, else the
/// workspace's `data/`. `None` (and a note on stderr) if absent, so tests
/// that need real data can skip.
pub fn mnist_root() -> Option<std::path::PathBuf> {
    let root = std::env::var_os("VARNET_DATA_DIR")
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    let present = varnet::datasets::MNIST_FILES.iter().all(|f| {
        [root.join("mnist"), root.clone()]
            .iter()
            .any(|d| d.join(f).is_file() || d.join(format!("{f}.gz")).is_file())
    });
    if present {
        Some(root)
    } else {
        eprintln!("MNIST not found under {}; skipping (run scripts/fetch_mnist.sh)", root.display());
        None
    }
}
