//! Raw numeric kernels behind the differentiable ops. Everything here works on
//! flat row-major slices; shape validation happens in the graph layer.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major matrices, where
/// `op(x)` optionally transposes. `a` is `m x k` after `op`, `b` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the `m*k`, `k*n` and `m*n`
    // buffers checked by the debug assertions, and `c` does not alias `a`/`b`.
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `[C,H,W]` image into a `[C*R*R, H'*W']` patch matrix.
pub(crate) fn im2col(input: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let ncols = g.cols();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &input[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    if g.stride == 1 && g.padding == 0 {
                        line.copy_from_slice(&src[kx..kx + g.out_w]);
                        continue;
                    }
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        *v = if ix < 0 || ix >= g.width as isize {
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

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the image.
pub(crate) fn col2im_add(cols: &[f64], g: &ConvGeom, out: &mut [f64]) {
    let ncols = g.cols();
    let pad = g.padding as isize;
    for c in 0..g.channels {
        let plane = &mut out[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in line.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - pad;
                        if ix >= 0 && (ix as usize) < g.width {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of a batch: input `[N,C,H,W]`, kernel `[K,C,R,R]`.
pub(crate) fn conv2d_forward(input: &[f64], batch: usize, kernel: &[f64], out_ch: usize, g: &ConvGeom) -> Vec<f64> {
    let in_sz = g.channels * g.height * g.width;
    let out_sz = out_ch * g.cols();
    let mut out = vec![0.0; batch * out_sz];
    let mut cols = vec![0.0; g.rows() * g.cols()];
    for n in 0..batch {
        im2col(&input[n * in_sz..(n + 1) * in_sz], g, &mut cols);
        gemm(
            out_ch,
            g.rows(),
            g.cols(),
            kernel,
            false,
            &cols,
            false,
            &mut out[n * out_sz..(n + 1) * out_sz],
            0.0,
        );
    }
    out
}

/// Accumulates input and kernel gradients for [`conv2d_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    input: &[f64],
    batch: usize,
    kernel: &[f64],
    out_ch: usize,
    g: &ConvGeom,
    grad_out: &[f64],
    grad_input: Option<&mut [f64]>,
    grad_kernel: Option<&mut [f64]>,
) {
    let in_sz = g.channels * g.height * g.width;
    let out_sz = out_ch * g.cols();
    let mut cols = vec![0.0; g.rows() * g.cols()];
    if let Some(gk) = grad_kernel {
        for n in 0..batch {
            im2col(&input[n * in_sz..(n + 1) * in_sz], g, &mut cols);
            gemm(
                out_ch,
                g.cols(),
                g.rows(),
                &grad_out[n * out_sz..(n + 1) * out_sz],
                false,
                &cols,
                true,
                gk,
                1.0,
            );
        }
    }
    if let Some(gi) = grad_input {
        for n in 0..batch {
            gemm(
                g.rows(),
                out_ch,
                g.cols(),
                kernel,
                true,
                &grad_out[n * out_sz..(n + 1) * out_sz],
                false,
                &mut cols,
                0.0,
            );
            col2im_add(&cols, g, &mut gi[n * in_sz..(n + 1) * in_sz]);
        }
    }
}

/// 2x2 non-overlapping max pooling over `[N*C]` planes of `h x w`.
/// Returns the pooled values and, per output cell, the flat input index of
/// the winning cell (first occurrence in row-major scan on ties).
pub(crate) fn maxpool2_forward(input: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best_idx = base + 2 * i * w + 2 * j;
                let mut best = input[best_idx];
                for di in 0..2 {
                    for dj in 0..2 {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

pub(crate) fn softmax_rows(logits: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut probs = vec![0.0; rows * cols];
    for r in 0..rows {
        let row = &logits[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dst = &mut probs[r * cols..(r + 1) * cols];
        let mut total = 0.0;
        for (d, &x) in dst.iter_mut().zip(row) {
            *d = (x - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d /= total);
    }
    probs
}
