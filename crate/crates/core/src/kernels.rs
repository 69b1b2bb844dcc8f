//! Convolution kernels on channel-major batches via im2col + GEMM.
//!
//! A batch `[C, B, H, W]` is unfolded into a `(C*k*k) x (B*H'*W')` column
//! matrix, so one GEMM against the `[C_out, C*k*k]` kernel matrix produces the
//! `[C_out, B, H', W']` output directly.

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{Dims4, Tensor};

/// Geometry of a strided, zero-padded square-kernel cross-correlation from
/// an `h x w` input to an `ho x wo` output.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(d: Dims4, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if k == 0 || stride == 0 {
            return Err(shape_err!("kernel {} / stride {} must be positive", k, stride));
        }
        if d.h + 2 * pad < k || d.w + 2 * pad < k {
            return Err(shape_err!(
                "input {}x{} with pad {} smaller than kernel {}",
                d.h,
                d.w,
                pad,
                k
            ));
        }
        Ok(Self {
            c: d.c,
            b: d.b,
            h: d.h,
            w: d.w,
            k,
            stride,
            pad,
            ho: (d.h + 2 * pad - k) / stride + 1,
            wo: (d.w + 2 * pad - k) / stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.b * self.ho * self.wo
    }

    /// 1x1, stride 1, no padding: the column matrix is the input itself.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output positions `o` in `0..n_out` whose input `o * s + off - p` lies in
/// `0..n_in`, as a half-open range.
fn valid_range(off: usize, s: usize, p: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = if p > off { (p - off).div_ceil(s) } else { 0 };
    let hi = if n_in + p > off { ((n_in + p - off - 1) / s + 1).min(n_out) } else { 0 };
    (lo.min(hi), hi)
}

pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let mut cols = Vec::with_capacity(g.rows() * g.cols());
    let zero = T::zero();
    for c in 0..g.c {
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, s, p, g.h, g.ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(kx, s, p, g.w, g.wo);
                for b in 0..g.b {
                    let src = &x[(c * g.b + b) * g.h * g.w..(c * g.b + b + 1) * g.h * g.w];
                    cols.resize(cols.len() + oy_lo * g.wo, zero);
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let row = &src[iy * g.w..(iy + 1) * g.w];
                        cols.resize(cols.len() + ox_lo, zero);
                        if ox_hi > ox_lo {
                            let ix0 = ox_lo * s + kx - p;
                            if s == 1 {
                                cols.extend_from_slice(&row[ix0..ix0 + (ox_hi - ox_lo)]);
                            } else {
                                cols.extend(row[ix0..].iter().step_by(s).take(ox_hi - ox_lo).copied());
                            }
                        }
                        cols.resize(cols.len() + (g.wo - ox_hi), zero);
                    }
                    cols.resize(cols.len() + (g.ho - oy_hi) * g.wo, zero);
                }
            }
        }
    }
    debug_assert_eq!(cols.len(), g.rows() * g.cols());
    cols
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating overlaps.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let ncols = g.cols();
    let mut x = vec![T::zero(); g.c * g.b * g.h * g.w];
    for c in 0..g.c {
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, s, p, g.h, g.ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(kx, s, p, g.w, g.wo);
                if ox_hi <= ox_lo {
                    continue;
                }
                let row = (c * k + ky) * k + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                let ix0 = ox_lo * s + kx - p;
                for b in 0..g.b {
                    let plane = (c * g.b + b) * g.h * g.w;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - p;
                        let base = (b * g.ho + oy) * g.wo;
                        let src = &src_row[base + ox_lo..base + ox_hi];
                        let dst = &mut x[plane + iy * g.w..plane + (iy + 1) * g.w];
                        if s == 1 {
                            for (d, &v) in dst[ix0..ix0 + src.len()].iter_mut().zip(src) {
                                *d += v;
                            }
                        } else {
                            for (d, &v) in dst[ix0..].iter_mut().step_by(s).zip(src) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

fn out_shape(rank: usize, c: usize, b: usize, h: usize, w: usize) -> Vec<usize> {
    if rank == 3 {
        vec![c, h, w]
    } else {
        vec![c, b, h, w]
    }
}

fn kernel_dims<T: Scalar>(w: &Tensor<T>) -> Result<(usize, usize, usize)> {
    match *w.shape() {
        [a, b, k1, k2] if k1 == k2 => Ok((a, b, k1)),
        _ => Err(shape_err!("kernel must be [A,B,k,k], got {:?}", w.shape())),
    }
}

/// Cross-correlation of `x` (`[C_in,(B,)H,W]`) with `kernel` (`[C_out,C_in,k,k]`).
pub fn conv2d<T: Scalar>(x: &Tensor<T>, kernel: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let d = x.dims4()?;
    let (cout, cin, k) = kernel_dims(kernel)?;
    if cin != d.c {
        return Err(shape_err!("conv2d: input has {} channels, kernel expects {}", d.c, cin));
    }
    let g = ConvGeom::new(d, k, stride, pad)?;
    let n = g.cols();
    let mut out = vec![T::zero(); cout * n];
    if g.is_pointwise() {
        T::gemm(cout, g.rows(), n, T::one(), kernel.data(), false, x.data(), false, T::zero(), &mut out);
    } else {
        let cols = im2col(x.data(), &g);
        T::gemm(cout, g.rows(), n, T::one(), kernel.data(), false, &cols, false, T::zero(), &mut out);
    }
    Tensor::new(out_shape(x.rank(), cout, d.b, g.ho, g.wo), out)
}

/// Returns `(d_input, d_kernel)` for [`conv2d`] given the output gradient.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let d = x.dims4()?;
    let (cout, _, k) = kernel_dims(kernel)?;
    let g = ConvGeom::new(d, k, stride, pad)?;
    let n = g.cols();
    let rows = g.rows();
    let dx = if need_input {
        let mut dcols = vec![T::zero(); rows * n];
        T::gemm(rows, cout, n, T::one(), kernel.data(), true, dy.data(), false, T::zero(), &mut dcols);
        let data = if g.is_pointwise() { dcols } else { col2im(&dcols, &g) };
        Some(Tensor::new(x.shape().to_vec(), data)?)
    } else {
        None
    };
    let dk = if need_kernel {
        let mut dw = vec![T::zero(); cout * rows];
        if g.is_pointwise() {
            T::gemm(cout, n, rows, T::one(), dy.data(), false, x.data(), true, T::zero(), &mut dw);
        } else {
            let cols = im2col(x.data(), &g);
            T::gemm(cout, n, rows, T::one(), dy.data(), false, &cols, true, T::zero(), &mut dw);
        }
        Some(Tensor::new(kernel.shape().to_vec(), dw)?)
    } else {
        None
    };
    Ok((dx, dk))
}

fn tconv_geom(d: Dims4, cout: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> Result<ConvGeom> {
    if out_pad >= stride.max(1) {
        return Err(shape_err!("output padding {} must be below stride {}", out_pad, stride));
    }
    let full_h = (d.h.max(1) - 1) * stride + k + out_pad;
    let full_w = (d.w.max(1) - 1) * stride + k + out_pad;
    if d.h == 0 || d.w == 0 || full_h < 2 * pad + 1 || full_w < 2 * pad + 1 {
        return Err(shape_err!("transposed conv input {}x{} too small", d.h, d.w));
    }
    let out = Dims4 {
        c: cout,
        b: d.b,
        h: full_h - 2 * pad,
        w: full_w - 2 * pad,
    };
    let g = ConvGeom::new(out, k, stride, pad)?;
    debug_assert_eq!((g.ho, g.wo), (d.h, d.w));
    Ok(g)
}

/// Transposed convolution with kernel `[C_in, C_out, k, k]`; the exact adjoint
/// of [`conv2d`] with the same kernel read as `[C_out', C_in', k, k]`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<Tensor<T>> {
    let d = x.dims4()?;
    let (cin, cout, k) = kernel_dims(kernel)?;
    if cin != d.c {
        return Err(shape_err!(
            "conv_transpose2d: input has {} channels, kernel expects {}",
            d.c,
            cin
        ));
    }
    let g = tconv_geom(d, cout, k, stride, pad, out_pad)?;
    let n = g.cols();
    let rows = g.rows();
    let mut cols = vec![T::zero(); rows * n];
    T::gemm(rows, cin, n, T::one(), kernel.data(), true, x.data(), false, T::zero(), &mut cols);
    let out = if g.is_pointwise() { cols } else { col2im(&cols, &g) };
    Tensor::new(out_shape(x.rank(), cout, d.b, g.h, g.w), out)
}

pub fn conv_transpose2d_backward<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
    stride: usize,
    pad: usize,
    out_pad: usize,
    need_input: bool,
    need_kernel: bool,
) -> Result<(Option<Tensor<T>>, Option<Tensor<T>>)> {
    let d = x.dims4()?;
    let (cin, cout, k) = kernel_dims(kernel)?;
    let g = tconv_geom(d, cout, k, stride, pad, out_pad)?;
    let n = g.cols();
    let rows = g.rows();
    let owned;
    let cols: &[T] = if g.is_pointwise() {
        dy.data()
    } else {
        owned = im2col(dy.data(), &g);
        &owned
    };
    let dx = if need_input {
        let mut dx = vec![T::zero(); cin * n];
        T::gemm(cin, rows, n, T::one(), kernel.data(), false, cols, false, T::zero(), &mut dx);
        Some(Tensor::new(x.shape().to_vec(), dx)?)
    } else {
        None
    };
    let dk = if need_kernel {
        let mut dw = vec![T::zero(); cin * rows];
        T::gemm(cin, n, rows, T::one(), x.data(), false, cols, true, T::zero(), &mut dw);
        Some(Tensor::new(kernel.shape().to_vec(), dw)?)
    } else {
        None
    };
    Ok((dx, dk))
}
