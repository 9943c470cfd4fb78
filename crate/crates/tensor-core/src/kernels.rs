//! Dense compute kernels shared by forward evaluation and replay.
//!
//! Every kernel uses a fixed sequential reduction order so that repeated
//! evaluation of the same tape is bit-identical.

use crate::scalar::Scalar;

/// out[m,n] += a[m,k] @ b[k,n], row-major. `out` must be zeroed by the caller.
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize, out: &mut [S]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                o_row[j] = o_row[j] + aik * b_row[j];
            }
        }
    }
}

pub fn transpose<S: Scalar>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

/// Spatial geometry of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn out_dim(in_dim: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = in_dim + 2 * pad;
        if k > padded || stride == 0 {
            return None;
        }
        Some((padded - k) / stride + 1)
    }
}

/// im2col: rows indexed by (n, oy, ox), columns by (c, dy, dx).
pub fn im2col<S: Scalar>(x: &[S], g: &ConvGeom) -> Vec<S> {
    let ckk = g.c_in * g.kh * g.kw;
    let rows = g.n * g.out_h * g.out_w;
    let mut cols = vec![S::zero(); rows * ckk];
    let mut row = 0usize;
    for n in 0..g.n {
        let x_n = &x[n * g.c_in * g.h * g.w..];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut cols[row * ckk..(row + 1) * ckk];
                let iy0 = (oy * g.stride) as isize - g.pad as isize;
                let ix0 = (ox * g.stride) as isize - g.pad as isize;
                let mut col = 0usize;
                for c in 0..g.c_in {
                    let x_c = &x_n[c * g.h * g.w..(c + 1) * g.h * g.w];
                    for dy in 0..g.kh {
                        let iy = iy0 + dy as isize;
                        if iy < 0 || iy >= g.h as isize {
                            col += g.kw;
                            continue;
                        }
                        let x_row = &x_c[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for dx in 0..g.kw {
                            let ix = ix0 + dx as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[col] = x_row[ix as usize];
                            }
                            col += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

/// Adjoint of im2col: scatter-add patch columns back into image positions.
pub fn col2im_acc<S: Scalar>(cols: &[S], g: &ConvGeom, x_grad: &mut [S]) {
    let ckk = g.c_in * g.kh * g.kw;
    let mut row = 0usize;
    for n in 0..g.n {
        let base_n = n * g.c_in * g.h * g.w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &cols[row * ckk..(row + 1) * ckk];
                let iy0 = (oy * g.stride) as isize - g.pad as isize;
                let ix0 = (ox * g.stride) as isize - g.pad as isize;
                let mut col = 0usize;
                for c in 0..g.c_in {
                    let base_c = base_n + c * g.h * g.w;
                    for dy in 0..g.kh {
                        let iy = iy0 + dy as isize;
                        if iy < 0 || iy >= g.h as isize {
                            col += g.kw;
                            continue;
                        }
                        let base_row = base_c + iy as usize * g.w;
                        for dx in 0..g.kw {
                            let ix = ix0 + dx as isize;
                            if ix >= 0 && ix < g.w as isize {
                                let i = base_row + ix as usize;
                                x_grad[i] = x_grad[i] + src[col];
                            }
                            col += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation forward: x[N,C,H,W] * k[O,C,kh,kw] -> [N,O,H',W'].
pub fn conv2d<S: Scalar>(x: &[S], k: &[S], g: &ConvGeom) -> Vec<S> {
    let ckk = g.c_in * g.kh * g.kw;
    let rows = g.n * g.out_h * g.out_w;
    let cols = im2col(x, g);
    // kernel [O, CKK] -> [CKK, O] so the matmul's inner loop runs over O
    let k_t = transpose(k, g.c_out, ckk);
    let mut out2d = vec![S::zero(); rows * g.c_out];
    matmul_acc(&cols, &k_t, rows, ckk, g.c_out, &mut out2d);
    // (n, oy, ox, o) -> (n, o, oy, ox)
    let hw = g.out_h * g.out_w;
    let mut out = vec![S::zero(); g.n * g.c_out * hw];
    for n in 0..g.n {
        for p in 0..hw {
            let src = &out2d[(n * hw + p) * g.c_out..(n * hw + p + 1) * g.c_out];
            for o in 0..g.c_out {
                out[(n * g.c_out + o) * hw + p] = src[o];
            }
        }
    }
    out
}

/// Reorder g[N,O,H',W'] into rows (n, oy, ox) x columns o.
fn grad_to_2d<S: Scalar>(gy: &[S], g: &ConvGeom) -> Vec<S> {
    let hw = g.out_h * g.out_w;
    let mut g2d = vec![S::zero(); g.n * hw * g.c_out];
    for n in 0..g.n {
        for o in 0..g.c_out {
            let src = &gy[(n * g.c_out + o) * hw..(n * g.c_out + o + 1) * hw];
            for p in 0..hw {
                g2d[(n * hw + p) * g.c_out + o] = src[p];
            }
        }
    }
    g2d
}

/// Gradient of conv2d w.r.t. its input: adjoint map of x -> conv2d(x, k).
pub fn conv2d_input_grad<S: Scalar>(gy: &[S], k: &[S], g: &ConvGeom) -> Vec<S> {
    let ckk = g.c_in * g.kh * g.kw;
    let rows = g.n * g.out_h * g.out_w;
    let g2d = grad_to_2d(gy, g);
    let mut d_cols = vec![S::zero(); rows * ckk];
    matmul_acc(&g2d, k, rows, g.c_out, ckk, &mut d_cols);
    let mut dx = vec![S::zero(); g.n * g.c_in * g.h * g.w];
    col2im_acc(&d_cols, g, &mut dx);
    dx
}

/// Gradient of conv2d w.r.t. its kernel: adjoint map of k -> conv2d(x, k).
pub fn conv2d_kernel_grad<S: Scalar>(x: &[S], gy: &[S], g: &ConvGeom) -> Vec<S> {
    let ckk = g.c_in * g.kh * g.kw;
    let rows = g.n * g.out_h * g.out_w;
    let cols = im2col(x, g);
    let g2d = grad_to_2d(gy, g);
    let g2d_t = transpose(&g2d, rows, g.c_out);
    let mut dk = vec![S::zero(); g.c_out * ckk];
    matmul_acc(&g2d_t, &cols, g.c_out, rows, ckk, &mut dk);
    dk
}
