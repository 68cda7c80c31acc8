//! Raw slice kernels shared by the value-level ops and the tape.

use crate::error::{Error, Result};

/// `c = a * b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rs: isize, cs: isize, rows: usize, cols: usize| {
        (rows.saturating_sub(1) as isize * rs + cols.saturating_sub(1) as isize * cs) as usize + 1
    };
    assert!(a.len() >= span(rsa, csa, m, k));
    assert!(b.len() >= span(rsb, csb, k, n));
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index dgemm will touch.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn affine_dims(x: &[usize], w: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    match (x, w, b) {
        ([batch, inputs], [outputs, w_in], [b_out]) if inputs == w_in && outputs == b_out => {
            Ok((*batch, *inputs, *outputs))
        }
        _ => Err(Error::dim(format!(
            "affine expects x [B, I], W [O, I], b [O]; got {x:?}, {w:?}, {b:?}"
        ))),
    }
}

pub(crate) fn affine_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    batch: usize,
    inputs: usize,
    outputs: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch * outputs);
    for _ in 0..batch {
        out.extend_from_slice(b);
    }
    // x [B, I] * W^T [I, O]
    let i = inputs as isize;
    gemm(batch, inputs, outputs, x, (i, 1), w, (1, i), &mut out, 1.0);
    out
}

/// Gradients of the affine map given upstream `g: [B, O]`.
pub(crate) fn affine_backward(
    g: &[f64],
    x: &[f64],
    w: &[f64],
    batch: usize,
    inputs: usize,
    outputs: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (i, o) = (inputs as isize, outputs as isize);
    let mut dx = vec![0.0; batch * inputs];
    gemm(batch, outputs, inputs, g, (o, 1), w, (i, 1), &mut dx, 0.0);
    let mut dw = vec![0.0; outputs * inputs];
    // g^T [O, B] * x [B, I]
    gemm(outputs, batch, inputs, g, (1, o), x, (i, 1), &mut dw, 0.0);
    let mut db = vec![0.0; outputs];
    for row in g.chunks_exact(outputs) {
        for (acc, v) in db.iter_mut().zip(row) {
            *acc += v;
        }
    }
    (dx, dw, db)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        x: &[usize],
        k: &[usize],
        b: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let ([batch, channels, height, width], [filters, k_c, kernel_h, kernel_w], [b_f]) =
            (x, k, b)
        else {
            return Err(Error::dim(format!(
                "conv2d expects x [B, C, H, W], K [F, C, kh, kw], b [F]; got {x:?}, {k:?}, {b:?}"
            )));
        };
        if k_c != channels || b_f != filters {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: x {x:?}, K {k:?}, b {b:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        let out = |size: usize, kernel: usize| -> Result<usize> {
            let padded = size + 2 * padding;
            if padded < kernel || (padded - kernel) % stride != 0 {
                return Err(Error::dim(format!(
                    "conv2d output size ({size} + 2*{padding} - {kernel}) / {stride} + 1 is not a positive integer"
                )));
            }
            Ok((padded - kernel) / stride + 1)
        };
        Ok(Self {
            batch: *batch,
            channels: *channels,
            height: *height,
            width: *width,
            filters: *filters,
            kernel_h: *kernel_h,
            kernel_w: *kernel_w,
            stride,
            padding,
            out_h: out(*height, *kernel_h)?,
            out_w: out(*width, *kernel_w)?,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.filters, self.out_h, self.out_w]
    }

    fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Unrolls one image into a `[C*kh*kw, out_h*out_w]` patch matrix.
fn im2col(g: &ConvGeometry, image: &[f64], cols: &mut [f64]) {
    let ohw = g.out_len();
    for c in 0..g.channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        dst_row.fill(0.0);
                        continue;
                    }
                    let src = &image[(c * g.height + iy as usize) * g.width..][..g.width];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch matrix back onto an image gradient.
fn col2im(g: &ConvGeometry, cols: &[f64], image: &mut [f64]) {
    let ohw = g.out_len();
    for c in 0..g.channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut image[(c * g.height + iy as usize) * g.width..][..g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output and, when `keep_cols`, the per-image patch matrices
/// needed by the backward pass.
pub(crate) fn conv_forward(
    g: &ConvGeometry,
    x: &[f64],
    k: &[f64],
    b: &[f64],
    keep_cols: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (pl, ohw) = (g.patch_len(), g.out_len());
    let mut out = vec![0.0; g.batch * g.filters * ohw];
    let mut all_cols = if keep_cols {
        vec![0.0; g.batch * pl * ohw]
    } else {
        Vec::new()
    };
    let mut scratch = vec![0.0; if keep_cols { 0 } else { pl * ohw }];
    for n in 0..g.batch {
        let cols: &mut [f64] = if keep_cols {
            &mut all_cols[n * pl * ohw..(n + 1) * pl * ohw]
        } else {
            &mut scratch
        };
        im2col(g, &x[n * g.image_len()..(n + 1) * g.image_len()], cols);
        let dst = &mut out[n * g.filters * ohw..(n + 1) * g.filters * ohw];
        for (f, row) in dst.chunks_exact_mut(ohw).enumerate() {
            row.fill(b[f]);
        }
        gemm(
            g.filters,
            pl,
            ohw,
            k,
            (pl as isize, 1),
            cols,
            (ohw as isize, 1),
            dst,
            1.0,
        );
    }
    (out, all_cols)
}

pub(crate) fn conv_backward(
    g: &ConvGeometry,
    upstream: &[f64],
    cols: &[f64],
    k: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (pl, ohw) = (g.patch_len(), g.out_len());
    let mut dx = vec![0.0; g.batch * g.image_len()];
    let mut dk = vec![0.0; g.filters * pl];
    let mut db = vec![0.0; g.filters];
    let mut dcols = vec![0.0; pl * ohw];
    for n in 0..g.batch {
        let gn = &upstream[n * g.filters * ohw..(n + 1) * g.filters * ohw];
        let cn = &cols[n * pl * ohw..(n + 1) * pl * ohw];
        for (f, row) in gn.chunks_exact(ohw).enumerate() {
            db[f] += row.iter().sum::<f64>();
        }
        // dK += g_n [F, OHW] * cols_n^T [OHW, PL]
        gemm(
            g.filters,
            ohw,
            pl,
            gn,
            (ohw as isize, 1),
            cn,
            (1, ohw as isize),
            &mut dk,
            1.0,
        );
        // dcols = K^T [PL, F] * g_n [F, OHW]
        gemm(
            pl,
            g.filters,
            ohw,
            k,
            (1, pl as isize),
            gn,
            (ohw as isize, 1),
            &mut dcols,
            0.0,
        );
        col2im(g, &dcols, &mut dx[n * g.image_len()..(n + 1) * g.image_len()]);
    }
    (dx, dk, db)
}
