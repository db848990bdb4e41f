//! Raw compute kernels behind the graph ops. Shapes are validated by callers.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    /// Columns of the unfolded matrix: one per output position of every sample.
    pub fn cols(&self) -> usize {
        self.n * self.pixels()
    }
}

/// Output columns `ox` whose input column `ox * stride + offset - pad` lies
/// inside `[0, w)`, as a half-open range.
fn valid_range(
    out_len: usize,
    in_len: usize,
    stride: usize,
    offset: usize,
    pad: usize,
) -> (usize, usize) {
    // ox * stride + offset >= pad
    let lo = pad.saturating_sub(offset).div_ceil(stride);
    // ox * stride + offset < in_len + pad
    let hi = if in_len + pad > offset {
        (in_len + pad - offset).div_ceil(stride).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds `x` into a `[C*kh*kw, N*Ho*Wo]` row-major matrix.
pub(crate) fn im2col<S: Scalar>(x: &[S], g: &ConvGeom) -> Vec<S> {
    let cols = g.cols();
    let p = g.pixels();
    let mut out = vec![S::zero(); g.patch() * cols];
    for c in 0..g.c {
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(g.ho, g.h, g.stride, ki, g.pad);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_range(g.wo, g.w, g.stride, kj, g.pad);
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let src = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let dst = &mut dst_row[n * p..(n + 1) * p];
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ki - g.pad;
                        let src_row = &src[iy * g.w..(iy + 1) * g.w];
                        let d = &mut dst[oy * g.wo + xlo..oy * g.wo + xhi];
                        let ix0 = xlo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            d.copy_from_slice(&src_row[ix0..ix0 + d.len()]);
                        } else {
                            for (t, v) in d.iter_mut().enumerate() {
                                *v = src_row[ix0 + t * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an `[N,C,H,W]` buffer.
pub(crate) fn col2im<S: Scalar>(col: &[S], g: &ConvGeom) -> Vec<S> {
    let cols = g.cols();
    let p = g.pixels();
    let mut x = vec![S::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(g.ho, g.h, g.stride, ki, g.pad);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_range(g.wo, g.w, g.stride, kj, g.pad);
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &col[row * cols..(row + 1) * cols];
                for n in 0..g.n {
                    let dst = &mut x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                    let src = &src_row[n * p..(n + 1) * p];
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ki - g.pad;
                        let dst_row = &mut dst[iy * g.w..(iy + 1) * g.w];
                        let s = &src[oy * g.wo + xlo..oy * g.wo + xhi];
                        let ix0 = xlo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            dst_row[ix0..ix0 + s.len()]
                                .iter_mut()
                                .zip(s)
                                .for_each(|(d, &v)| *d += v);
                        } else {
                            for (t, &v) in s.iter().enumerate() {
                                dst_row[ix0 + t * g.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Cross-correlation plus per-channel `bias`, NCHW out. `col` is `im2col(x)`.
pub(crate) fn conv2d_forward<S: Scalar>(
    col: &[S],
    w: &[S],
    bias: Option<&[S]>,
    g: &ConvGeom,
) -> Vec<S> {
    let cols = g.cols();
    let mut mat = vec![S::zero(); g.k * cols];
    S::gemm(
        g.k,
        g.patch(),
        cols,
        S::one(),
        w,
        (g.patch() as isize, 1),
        col,
        (cols as isize, 1),
        S::zero(),
        &mut mat,
        (cols as isize, 1),
    );
    let p = g.pixels();
    let mut out = vec![S::zero(); g.n * g.k * p];
    for k in 0..g.k {
        let b = bias.map_or(S::zero(), |b| b[k]);
        for n in 0..g.n {
            let src = &mat[k * cols + n * p..k * cols + (n + 1) * p];
            let dst = &mut out[(n * g.k + k) * p..(n * g.k + k + 1) * p];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`]; each output is computed only when requested.
pub(crate) struct ConvGrads<S> {
    pub input: Option<Vec<S>>,
    pub weight: Option<Vec<S>>,
    pub bias: Option<Vec<S>>,
}

/// `col` is `im2col(x)`; it is only read when the weight gradient is wanted.
pub(crate) fn conv2d_backward<S: Scalar>(
    col: &[S],
    w: &[S],
    gout: &[S],
    g: &ConvGeom,
    want: (bool, bool, bool),
) -> ConvGrads<S> {
    let cols = g.cols();
    let p = g.pixels();
    // [N,K,P] -> [K, N*P]
    let mut gmat = vec![S::zero(); g.k * cols];
    for n in 0..g.n {
        for k in 0..g.k {
            gmat[k * cols + n * p..k * cols + (n + 1) * p]
                .copy_from_slice(&gout[(n * g.k + k) * p..(n * g.k + k + 1) * p]);
        }
    }
    let bias = want.2.then(|| {
        (0..g.k)
            .map(|k| gmat[k * cols..(k + 1) * cols].iter().copied().sum())
            .collect()
    });
    let weight = want.1.then(|| {
        let mut gw = vec![S::zero(); w.len()];
        S::gemm(
            g.k,
            cols,
            g.patch(),
            S::one(),
            &gmat,
            (cols as isize, 1),
            col,
            (1, cols as isize),
            S::zero(),
            &mut gw,
            (g.patch() as isize, 1),
        );
        gw
    });
    let input = want.0.then(|| {
        let mut gcol = vec![S::zero(); g.patch() * cols];
        S::gemm(
            g.patch(),
            g.k,
            cols,
            S::one(),
            w,
            (1, g.patch() as isize),
            &gmat,
            (cols as isize, 1),
            S::zero(),
            &mut gcol,
            (cols as isize, 1),
        );
        col2im(&gcol, g)
    });
    ConvGrads {
        input,
        weight,
        bias,
    }
}
