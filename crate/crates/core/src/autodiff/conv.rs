//! 1-d convolution kernels as im2col + GEMM.

use matrixmultiply::dgemm;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvShape {
    pub n: usize,
    pub c_in: usize,
    pub t_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub pad_left: usize,
    pub t_out: usize,
}

impl ConvShape {
    fn rows(&self) -> usize {
        self.c_in * self.k
    }
}

/// `C = alpha A B + beta C` for row-major `A: m x k`, `B: k x n`.
/// Transposed operands are passed through strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices hold m*k, k*n and m*n elements laid out as described.
    unsafe {
        dgemm(
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

/// Unfolds one example `[c_in, t_in]` into `[c_in * k, t_out]`.
fn im2col(s: &ConvShape, x: &[f64], col: &mut [f64]) {
    for c in 0..s.c_in {
        let xc = &x[c * s.t_in..(c + 1) * s.t_in];
        for kk in 0..s.k {
            let dst = &mut col[(c * s.k + kk) * s.t_out..(c * s.k + kk + 1) * s.t_out];
            let shift = kk as isize - s.pad_left as isize;
            let lo = ((-shift).max(0) as usize).min(s.t_out);
            let hi = ((s.t_in as isize - shift).max(0) as usize).min(s.t_out).max(lo);
            dst[..lo].fill(0.0);
            if hi > lo {
                let start = (lo as isize + shift) as usize;
                dst[lo..hi].copy_from_slice(&xc[start..start + hi - lo]);
            }
            dst[hi..].fill(0.0);
        }
    }
}

fn col2im_add(s: &ConvShape, col: &[f64], gx: &mut [f64]) {
    for c in 0..s.c_in {
        for kk in 0..s.k {
            let src = &col[(c * s.k + kk) * s.t_out..(c * s.k + kk + 1) * s.t_out];
            let shift = kk as isize - s.pad_left as isize;
            let lo = (-shift).max(0) as usize;
            let hi = ((s.t_in as isize - shift).max(0) as usize).min(s.t_out);
            if lo >= hi {
                continue;
            }
            let start = (lo as isize + shift) as usize;
            for (d, v) in gx[c * s.t_in + start..c * s.t_in + start + hi - lo].iter_mut().zip(&src[lo..hi]) {
                *d += v;
            }
        }
    }
}

pub(crate) fn forward(s: &ConvShape, x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; s.n * s.c_out * s.t_out];
    let mut col = vec![0.0; s.rows() * s.t_out];
    for ni in 0..s.n {
        im2col(s, &x[ni * s.c_in * s.t_in..(ni + 1) * s.c_in * s.t_in], &mut col);
        let dst = &mut y[ni * s.c_out * s.t_out..(ni + 1) * s.c_out * s.t_out];
        gemm(s.c_out, s.rows(), s.t_out, w, false, &col, false, 0.0, dst);
    }
    y
}

/// Gradients with respect to the input and the kernel, each when requested.
pub(crate) fn backward(
    s: &ConvShape,
    g: &[f64],
    x: &[f64],
    w: &[f64],
    want_x: bool,
    want_w: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let mut gx = want_x.then(|| vec![0.0; s.n * s.c_in * s.t_in]);
    let mut gw = want_w.then(|| vec![0.0; s.c_out * s.rows()]);
    let mut col = vec![0.0; s.rows() * s.t_out];
    for ni in 0..s.n {
        let gi = &g[ni * s.c_out * s.t_out..(ni + 1) * s.c_out * s.t_out];
        if let Some(gw) = gw.as_mut() {
            im2col(s, &x[ni * s.c_in * s.t_in..(ni + 1) * s.c_in * s.t_in], &mut col);
            // gw += g_i col^T
            gemm(s.c_out, s.t_out, s.rows(), gi, false, &col, true, 1.0, gw);
        }
        if let Some(gx) = gx.as_mut() {
            // gcol = w^T g_i
            gemm(s.rows(), s.c_out, s.t_out, w, true, gi, false, 0.0, &mut col);
            col2im_add(s, &col, &mut gx[ni * s.c_in * s.t_in..(ni + 1) * s.c_in * s.t_in]);
        }
    }
    (gx, gw)
}
