//! Differentiable primitive operations: forward evaluation and the
//! vector-Jacobian products used by the tape.

use crate::error::{shape_err, Result};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub enum Op<T> {
    /// inputs: x `[C_in,..]`, kernel `[C_out,C_in,k,k]`
    Conv2d { stride: usize, pad: usize },
    /// inputs: x `[C_in,..]`, kernel `[C_in,C_out,k,k]`
    ConvTranspose2d { stride: usize, pad: usize, out_pad: usize },
    /// inputs: x `[C,..]`, v `[C]`; adds `v[c]` to every element of channel `c`
    AddChannel,
    /// inputs: x `[C,..]`, v `[C]`; scales channel `c` by `v[c]`
    MulChannel,
    Add,
    Sub,
    Mul,
    Div,
    Scale(T),
    AddScalar(T),
    LeakyRelu(T),
    Sigmoid,
    Softplus,
    Tanh,
    Exp,
    Ln,
    Clamp { lo: T, hi: T },
    /// Standard normal CDF.
    NormalCdf,
    Concat,
    SliceChannels { start: usize, end: usize },
    Reshape(Vec<usize>),
    Sum,
    /// `[C,B,H,W] -> [C,B,1,1]` mean over the spatial plane.
    SpatialMean,
}

fn arity<T>(op: &Op<T>) -> Option<usize> {
    use Op::*;
    match op {
        Conv2d { .. } | ConvTranspose2d { .. } | AddChannel | MulChannel | Add | Sub | Mul | Div => Some(2),
        Concat => None,
        _ => Some(1),
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub(crate) fn normal_cdf<T: Scalar>(x: T) -> T {
    T::cst(0.5 * libm::erfc(-x.f64() * std::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
fn normal_pdf<T: Scalar>(x: T) -> T {
    let x = x.f64();
    T::cst((-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt())
}

fn channel_vec<T: Scalar>(x: &Tensor<T>, v: &Tensor<T>) -> Result<usize> {
    if v.len() != x.channels() || x.rank() < 2 {
        return Err(shape_err!(
            "per-channel vector of {} for tensor {:?}",
            v.len(),
            x.shape()
        ));
    }
    Ok(x.len() / x.channels())
}

pub fn forward<T: Scalar>(op: &Op<T>, xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if let Some(n) = arity(op) {
        if xs.len() != n {
            return Err(shape_err!("{:?} expects {} inputs, got {}", op, n, xs.len()));
        }
    }
    use Op::*;
    Ok(match op {
        Conv2d { stride, pad } => kernels::conv2d(xs[0], xs[1], *stride, *pad)?,
        ConvTranspose2d { stride, pad, out_pad } => {
            kernels::conv_transpose2d(xs[0], xs[1], *stride, *pad, *out_pad)?
        }
        AddChannel | MulChannel => {
            let (x, v) = (xs[0], xs[1]);
            let per = channel_vec(x, v)?;
            let mut out = x.clone();
            for (c, chunk) in out.data_mut().chunks_mut(per).enumerate() {
                let s = v.data()[c];
                if matches!(op, AddChannel) {
                    chunk.iter_mut().for_each(|e| *e += s);
                } else {
                    chunk.iter_mut().for_each(|e| *e *= s);
                }
            }
            out
        }
        Add => xs[0].zip_map(xs[1], |a, b| a + b)?,
        Sub => xs[0].zip_map(xs[1], |a, b| a - b)?,
        Mul => xs[0].zip_map(xs[1], |a, b| a * b)?,
        Div => xs[0].zip_map(xs[1], |a, b| a / b)?,
        Scale(s) => xs[0].map(|a| a * *s),
        AddScalar(s) => xs[0].map(|a| a + *s),
        LeakyRelu(slope) => xs[0].map(|a| if a > T::zero() { a } else { a * *slope }),
        Sigmoid => xs[0].map(sigmoid),
        Softplus => xs[0].map(softplus),
        Tanh => xs[0].map(|a| a.tanh()),
        Exp => xs[0].map(|a| a.exp()),
        Ln => xs[0].map(|a| a.ln()),
        Clamp { lo, hi } => xs[0].map(|a| a.max(*lo).min(*hi)),
        NormalCdf => xs[0].map(normal_cdf),
        Concat => Tensor::concat_channels(xs)?,
        SliceChannels { start, end } => xs[0].slice_channels(*start, *end)?,
        Reshape(shape) => xs[0].clone().reshape(shape)?,
        Sum => Tensor::scalar(xs[0].sum()),
        SpatialMean => {
            let d = xs[0].dims4()?;
            let plane = d.plane();
            let inv = T::one() / T::cst(plane as f64);
            let data: Vec<T> = xs[0]
                .data()
                .chunks(plane)
                .map(|p| p.iter().copied().sum::<T>() * inv)
                .collect();
            Tensor::new(vec![d.c, d.b, 1, 1], data)?
        }
    })
}

/// Vector-Jacobian product. Returns one optional gradient per input; inputs
/// whose `needs` flag is false get `None`.
pub fn backward<T: Scalar>(
    op: &Op<T>,
    xs: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &Tensor<T>,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    use Op::*;
    let unary = |f: &dyn Fn(usize) -> T| -> Result<Vec<Option<Tensor<T>>>> {
        let gd = g.data();
        let data = (0..gd.len()).map(|i| gd[i] * f(i)).collect();
        Ok(vec![Some(Tensor::new(xs[0].shape().to_vec(), data)?)])
    };
    let x0 = xs[0].data();
    let od = out.data();
    match op {
        Conv2d { stride, pad } => {
            let (dx, dk) = kernels::conv2d_backward(xs[0], xs[1], g, *stride, *pad, needs[0], needs[1])?;
            Ok(vec![dx, dk])
        }
        ConvTranspose2d { stride, pad, out_pad } => {
            let (dx, dk) = kernels::conv_transpose2d_backward(
                xs[0], xs[1], g, *stride, *pad, *out_pad, needs[0], needs[1],
            )?;
            Ok(vec![dx, dk])
        }
        AddChannel => {
            let per = channel_vec(xs[0], xs[1])?;
            let dv = needs[1].then(|| {
                Tensor::from_fn(xs[1].shape(), |c| g.data()[c * per..(c + 1) * per].iter().copied().sum())
            });
            Ok(vec![needs[0].then(|| g.clone()), dv])
        }
        MulChannel => {
            let per = channel_vec(xs[0], xs[1])?;
            let v = xs[1].data();
            let dx = needs[0].then(|| Tensor::from_fn(xs[0].shape(), |i| g.data()[i] * v[i / per]));
            let dv = needs[1].then(|| {
                Tensor::from_fn(xs[1].shape(), |c| {
                    (c * per..(c + 1) * per).map(|i| g.data()[i] * x0[i]).sum()
                })
            });
            Ok(vec![dx, dv])
        }
        Add => Ok(vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())]),
        Sub => Ok(vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]),
        Mul => Ok(vec![
            needs[0].then(|| g.zip_map(xs[1], |a, b| a * b)).transpose()?,
            needs[1].then(|| g.zip_map(xs[0], |a, b| a * b)).transpose()?,
        ]),
        Div => {
            let b = xs[1].data();
            Ok(vec![
                needs[0].then(|| Tensor::from_fn(g.shape(), |i| g.data()[i] / b[i])),
                needs[1].then(|| Tensor::from_fn(g.shape(), |i| -g.data()[i] * od[i] / b[i])),
            ])
        }
        Scale(s) => Ok(vec![Some(g.map(|v| v * *s))]),
        AddScalar(_) | Reshape(_) => Ok(vec![Some(Tensor::new(xs[0].shape().to_vec(), g.data().to_vec())?)]),
        LeakyRelu(slope) => unary(&|i| if x0[i] > T::zero() { T::one() } else { *slope }),
        Sigmoid => unary(&|i| od[i] * (T::one() - od[i])),
        Softplus => unary(&|i| sigmoid(x0[i])),
        Tanh => unary(&|i| T::one() - od[i] * od[i]),
        Exp => unary(&|i| od[i]),
        Ln => unary(&|i| T::one() / x0[i]),
        Clamp { lo, hi } => unary(&|i| {
            if x0[i] >= *lo && x0[i] <= *hi {
                T::one()
            } else {
                T::zero()
            }
        }),
        NormalCdf => unary(&|i| normal_pdf(x0[i])),
        Concat => {
            let mut off = 0;
            let mut grads = Vec::with_capacity(xs.len());
            for (x, &need) in xs.iter().zip(needs) {
                let c = x.channels();
                grads.push(if need {
                    Some(g.slice_channels(off, off + c)?)
                } else {
                    None
                });
                off += c;
            }
            Ok(grads)
        }
        SliceChannels { start, end } => {
            let c = xs[0].channels();
            let per = xs[0].len() / c.max(1);
            let mut dx = Tensor::zeros(xs[0].shape());
            dx.data_mut()[start * per..end * per].copy_from_slice(g.data());
            Ok(vec![Some(dx)])
        }
        Sum => {
            let s = g.data()[0];
            Ok(vec![Some(Tensor::full(xs[0].shape(), s))])
        }
        SpatialMean => {
            let d = xs[0].dims4()?;
            let plane = d.plane();
            let inv = T::one() / T::cst(plane as f64);
            Ok(vec![Some(Tensor::from_fn(xs[0].shape(), |i| g.data()[i / plane] * inv))])
        }
    }
}
