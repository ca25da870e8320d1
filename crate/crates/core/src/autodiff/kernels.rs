//! Raw numeric kernels. Shapes are validated by the caller.

/// `c = op(a) · op(b) + beta · c` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a` is stored `m×k` (or `k×m` when `ta`), `b` is stored `k×n` (or `n×k`
/// when `tb`), `c` is `m×n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the strided extents passed to dgemm.
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

/// Stride/padding of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

/// Resolved sizes of one convolution instance.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub ho: usize,
    pub wo: usize,
    pub geom: ConvGeom,
}

impl ConvDims {
    fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.c_in * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.c_out * self.ho * self.wo
    }
}

fn im2col(x: &[f64], d: &ConvDims, cols: &mut [f64]) {
    let s = d.geom.stride as isize;
    let p = d.geom.pad as isize;
    let hw = d.col_cols();
    for c in 0..d.c_in {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oi in 0..d.ho {
                    let ii = oi as isize * s + ki as isize - p;
                    let out_row = &mut dst[oi * d.wo..(oi + 1) * d.wo];
                    if ii < 0 || ii >= d.h as isize {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * d.w..(ii as usize + 1) * d.w];
                    for (oj, v) in out_row.iter_mut().enumerate() {
                        let jj = oj as isize * s + kj as isize - p;
                        *v = if jj < 0 || jj >= d.w as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(cols: &[f64], d: &ConvDims, x: &mut [f64]) {
    let s = d.geom.stride as isize;
    let p = d.geom.pad as isize;
    let hw = d.col_cols();
    for c in 0..d.c_in {
        let plane = &mut x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oi in 0..d.ho {
                    let ii = oi as isize * s + ki as isize - p;
                    if ii < 0 || ii >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * d.w..(ii as usize + 1) * d.w];
                    for oj in 0..d.wo {
                        let jj = oj as isize * s + kj as isize - p;
                        if jj >= 0 && jj < d.w as isize {
                            dst[jj as usize] += src[oi * d.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation `y[b] = K · im2col(x[b])`.
pub(crate) fn conv_forward(x: &[f64], k: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.batch * d.out_len()];
    let mut cols = vec![0.0; d.col_rows() * d.col_cols()];
    for b in 0..d.batch {
        im2col(&x[b * d.in_len()..(b + 1) * d.in_len()], d, &mut cols);
        gemm(
            d.c_out,
            d.col_rows(),
            d.col_cols(),
            k,
            false,
            &cols,
            false,
            0.0,
            &mut out[b * d.out_len()..(b + 1) * d.out_len()],
        );
    }
    out
}

/// Adjoint of [`conv_forward`] in its input: maps an output-shaped `g` to an
/// input-shaped array (also the transposed convolution).
pub(crate) fn conv_input_grad(g: &[f64], k: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.batch * d.in_len()];
    let mut cols = vec![0.0; d.col_rows() * d.col_cols()];
    for b in 0..d.batch {
        gemm(
            d.col_rows(),
            d.c_out,
            d.col_cols(),
            k,
            true,
            &g[b * d.out_len()..(b + 1) * d.out_len()],
            false,
            0.0,
            &mut cols,
        );
        col2im_add(&cols, d, &mut out[b * d.in_len()..(b + 1) * d.in_len()]);
    }
    out
}

/// Adjoint of [`conv_forward`] in its kernel.
pub(crate) fn conv_kernel_grad(x: &[f64], g: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.c_out * d.col_rows()];
    let mut cols = vec![0.0; d.col_rows() * d.col_cols()];
    for b in 0..d.batch {
        im2col(&x[b * d.in_len()..(b + 1) * d.in_len()], d, &mut cols);
        gemm(
            d.c_out,
            d.col_cols(),
            d.col_rows(),
            &g[b * d.out_len()..(b + 1) * d.out_len()],
            false,
            &cols,
            true,
            1.0,
            &mut out,
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_transposed_layouts_agree() {
        let (m, k, n) = (3, 4, 2);
        let a: Vec<f64> = (0..m * k).map(|v| v as f64 * 0.5 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64).sin()).collect();
        let want = naive_gemm(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { &at } else { &a };
            let bb = if tb { &bt } else { &b };
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, aa, ta, bb, tb, 0.0, &mut c);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_matches_direct_loop() {
        let d = ConvDims {
            batch: 2,
            c_in: 2,
            h: 5,
            w: 4,
            c_out: 3,
            kh: 3,
            kw: 2,
            ho: 3,
            wo: 3,
            geom: ConvGeom { stride: 2, pad: 1 },
        };
        let x: Vec<f64> = (0..d.batch * d.in_len()).map(|v| (v as f64 * 0.37).cos()).collect();
        let k: Vec<f64> = (0..d.c_out * d.col_rows()).map(|v| (v as f64 * 0.11).sin()).collect();
        let y = conv_forward(&x, &k, &d);
        for b in 0..d.batch {
            for o in 0..d.c_out {
                for oi in 0..d.ho {
                    for oj in 0..d.wo {
                        let mut acc = 0.0;
                        for c in 0..d.c_in {
                            for ki in 0..d.kh {
                                for kj in 0..d.kw {
                                    let ii = (oi * 2 + ki) as isize - 1;
                                    let jj = (oj * 2 + kj) as isize - 1;
                                    if ii < 0 || jj < 0 || ii >= 5 || jj >= 4 {
                                        continue;
                                    }
                                    let xv = x[b * d.in_len() + c * 20 + ii as usize * 4 + jj as usize];
                                    let kv = k[((o * d.c_in + c) * d.kh + ki) * d.kw + kj];
                                    acc += xv * kv;
                                }
                            }
                        }
                        let got = y[b * d.out_len() + o * 9 + oi * 3 + oj];
                        assert!((got - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
