//! Low-level loops behind the autodiff ops: GEMM dispatch, im2col/col2im and
//! pooling. Everything here works on flat slices; shape checks happen in the
//! callers.

/// Geometry of a 2-D convolution over an `N x C x H x W` batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Rows of the im2col matrix (`Cin * kh * kw`).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Columns of the im2col matrix (`N * H' * W'`).
    pub fn cols(&self) -> usize {
        self.batch * self.out_plane()
    }
}

/// `c = a * b (+ c if accumulate)` where `a` is `m x k` and `b` is `k x n`.
/// `trans_a`/`trans_b` mean the operand is stored transposed (row-major).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every strided access stays within
    // the three slices, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
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

/// Unfolds input patches into a `patch_len x cols` matrix.
pub fn im2col(input: &[f32], g: &ConvGeometry, cols: &mut [f32]) {
    let ncols = g.cols();
    let plane = g.out_plane();
    debug_assert_eq!(cols.len(), g.patch_len() * ncols);
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let row_buf = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let src = &input[(n * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    let dst = &mut row_buf[n * plane..(n + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - pad;
                        let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                        if iy < 0 || iy >= g.height as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let srow = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                        if g.stride == 1 && g.padding == 0 {
                            drow.copy_from_slice(&srow[kj..kj + g.out_w]);
                            continue;
                        }
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - pad;
                            *d = if ix < 0 || ix >= g.width as isize {
                                0.0
                            } else {
                                srow[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds a column matrix back into an
/// input-shaped gradient buffer.
pub fn col2im(cols: &[f32], g: &ConvGeometry, grad_input: &mut [f32]) {
    let ncols = g.cols();
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let row_buf = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.batch {
                    let dst = &mut grad_input[(n * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    let src = &row_buf[n * plane..(n + 1) * plane];
                    for oy in 0..g.out_h {
                        let iy = (oy * g.stride + ki) as isize - pad;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let drow = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                        let srow = &src[oy * g.out_w..(oy + 1) * g.out_w];
                        if g.stride == 1 && g.padding == 0 {
                            drow[kj..kj + g.out_w].iter_mut().zip(srow).for_each(|(d, &s)| *d += s);
                            continue;
                        }
                        for (ox, &s) in srow.iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - pad;
                            if ix >= 0 && (ix as usize) < g.width {
                                drow[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Swaps the two leading "outer" axes of a `[a, b, inner]` buffer into `[b, a, inner]`.
pub fn swap_outer(src: &[f32], a: usize, b: usize, inner: usize, dst: &mut [f32]) {
    debug_assert_eq!(src.len(), a * b * inner);
    for i in 0..a {
        for j in 0..b {
            let s = (i * b + j) * inner;
            let d = (j * a + i) * inner;
            dst[d..d + inner].copy_from_slice(&src[s..s + inner]);
        }
    }
}

/// Max pooling over `planes` independent `h x w` planes. Writes the argmax
/// (flat index inside the plane) of every output cell.
#[allow(clippy::too_many_arguments)]
pub fn max_pool_forward(
    input: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    kernel: usize,
    stride: usize,
    out: &mut [f32],
    argmax: &mut [u32],
) {
    let oh = (h - kernel) / stride + 1;
    let ow = (w - kernel) / stride + 1;
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = (oy * stride) * w + ox * stride;
                for ky in 0..kernel {
                    let row = (oy * stride + ky) * w;
                    for kx in 0..kernel {
                        let idx = row + ox * stride + kx;
                        let v = src[idx];
                        // first maximum wins on ties; NaN propagates
                        if v > best || v.is_nan() && !best.is_nan() {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                let o = p * oh * ow + oy * ow + ox;
                out[o] = best;
                argmax[o] = best_idx as u32;
            }
        }
    }
}

pub fn max_pool_backward(
    grad_out: &[f32],
    argmax: &[u32],
    planes: usize,
    in_plane: usize,
    grad_input: &mut [f32],
) {
    let out_plane = grad_out.len() / planes;
    for p in 0..planes {
        let gi = &mut grad_input[p * in_plane..(p + 1) * in_plane];
        let go = &grad_out[p * out_plane..(p + 1) * out_plane];
        let am = &argmax[p * out_plane..(p + 1) * out_plane];
        for (&g, &i) in go.iter().zip(am) {
            gi[i as usize] += g;
        }
    }
}
