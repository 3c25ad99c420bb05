//! Raw numeric kernels behind the tape ops. Shapes are checked by the caller.

/// `c = a·b` (or `c += a·b` when `accumulate`) for row-major `a: m×k`,
/// `b: k×n`. Either operand may be read transposed from its storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_transposed: bool,
    b: &[f64],
    b_transposed: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_transposed { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_transposed { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: lengths asserted above; strides describe the stated layouts.
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.height - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width - self.kw) / self.stride + 1
    }

    fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

/// Unfolds `x: [C,H,W]` into `[C·kh·kw, Ho·Wo]`.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cols = oh * ow;
    let mut out = vec![0.0; g.patch() * cols];
    for c in 0..g.channels {
        for p in 0..g.kh {
            for q in 0..g.kw {
                let row = (c * g.kh + p) * g.kw + q;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for i in 0..oh {
                    let src = (c * g.height + i * g.stride + p) * g.width + q;
                    for j in 0..ow {
                        dst[i * ow + j] = x[src + j * g.stride];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of `im2col`: scatter-adds columns back into `[C,H,W]`.
fn col2im(cols: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = oh * ow;
    let mut out = vec![0.0; g.channels * g.height * g.width];
    for c in 0..g.channels {
        for p in 0..g.kh {
            for q in 0..g.kw {
                let row = (c * g.kh + p) * g.kw + q;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for i in 0..oh {
                    let dst = (c * g.height + i * g.stride + p) * g.width + q;
                    for j in 0..ow {
                        out[dst + j * g.stride] += src[i * ow + j];
                    }
                }
            }
        }
    }
    out
}

/// Valid cross-correlation: `x: [C,H,W]`, `w: [O,C,kh,kw]` → `[O,Ho,Wo]`.
pub(crate) fn conv2d(x: &[f64], w: &[f64], out_channels: usize, g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(x, g);
    let n = g.out_h() * g.out_w();
    let mut y = vec![0.0; out_channels * n];
    gemm(out_channels, g.patch(), n, w, false, &cols, false, &mut y, false);
    y
}

/// Gradient of `conv2d` with respect to its weight: `Σ gy[o,i,j]·x[c, i·s+p, j·s+q]`.
pub(crate) fn conv_weight_grad(x: &[f64], gy: &[f64], out_channels: usize, g: &ConvGeom) -> Vec<f64> {
    let cols = im2col(x, g);
    let n = g.out_h() * g.out_w();
    let mut gw = vec![0.0; out_channels * g.patch()];
    gemm(out_channels, n, g.patch(), gy, false, &cols, true, &mut gw, false);
    gw
}

/// Adjoint of `conv2d` in its input: `gy: [O,Ho,Wo]`, `w: [O,C,kh,kw]` → `[C,H,W]`.
pub(crate) fn conv_transpose(gy: &[f64], w: &[f64], out_channels: usize, g: &ConvGeom) -> Vec<f64> {
    let n = g.out_h() * g.out_w();
    let mut cols = vec![0.0; g.patch() * n];
    gemm(g.patch(), out_channels, n, w, true, gy, false, &mut cols, false);
    col2im(&cols, g)
}

/// Non-overlapping `k×k` average pooling of `[C,H,W]`; trailing rows and
/// columns that do not fill a window are dropped.
pub(crate) fn avg_pool(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for p in 0..k {
                    let row = (ch * h + i * k + p) * w + j * k;
                    for q in 0..k {
                        acc += x[row + q];
                    }
                }
                out[(ch * oh + i) * ow + j] = acc * inv;
            }
        }
    }
    out
}

/// Adjoint of `avg_pool`: spreads each pooled value evenly over its window.
pub(crate) fn upsample(g: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let inv = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let v = g[(ch * oh + i) * ow + j] * inv;
                for p in 0..k {
                    let row = (ch * h + i * k + p) * w + j * k;
                    for q in 0..k {
                        out[row + q] = v;
                    }
                }
            }
        }
    }
    out
}

/// Non-overlapping max pooling; returns pooled values and the flat input
/// index of each window's maximum (first maximum on ties).
pub(crate) fn max_pool(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / k, w / k);
    let mut out = vec![0.0; c * oh * ow];
    let mut arg = vec![0; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for p in 0..k {
                    for q in 0..k {
                        let idx = (ch * h + i * k + p) * w + j * k + q;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (ch * oh + i) * ow + j;
                out[o] = best;
                arg[o] = best_idx;
            }
        }
    }
    (out, arg)
}

pub(crate) fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `logsumexp(x) − x[label]`, written as `(m − x[label]) + ln_1p(Σ_{j≠argmax} e^{x_j − m})`
/// so confident predictions keep full relative precision.
pub(crate) fn cross_entropy(x: &[f64], label: usize) -> f64 {
    let (top, m) = x
        .iter()
        .copied()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(i, m), (j, v)| if v > m { (j, v) } else { (i, m) });
    let rest: f64 = x.iter().enumerate().filter(|&(j, _)| j != top).map(|(_, v)| (v - m).exp()).sum();
    (m - x[label]) + rest.ln_1p()
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^v)` without overflow for large `v`.
pub(crate) fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}
