//! Dense row-major tensors.
//!
//! Image-like tensors are either `[C, H, W]` (one image) or `[C, B, H, W]`
//! (a batch stored channel-major). Keeping the channel axis outermost makes
//! channel concatenation and slicing contiguous copies, and lets a convolution
//! over a whole batch run as a single matrix product.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

/// Channel, batch and spatial extents of an image-like tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims4 {
    pub c: usize,
    pub b: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(shape_err!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::cst(rng.gen_range(lo..hi)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(shape_err!("cannot reshape {:?} to {:?}", self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Interprets the tensor as `[C, H, W]` or `[C, B, H, W]`.
    pub fn dims4(&self) -> Result<Dims4> {
        match *self.shape.as_slice() {
            [c, h, w] => Ok(Dims4 { c, b: 1, h, w }),
            [c, b, h, w] => Ok(Dims4 { c, b, h, w }),
            _ => Err(shape_err!(
                "expected [C,H,W] or [C,B,H,W], got {:?}",
                self.shape
            )),
        }
    }

    pub fn channels(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::cst(v.f64())).collect(),
        }
    }

    /// Channels `[start, end)` of an image-like tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Self> {
        let c = self.channels();
        if start > end || end > c || self.rank() < 2 {
            return Err(shape_err!(
                "channel slice {}..{} out of range for {:?}",
                start,
                end,
                self.shape
            ));
        }
        let per = self.data.len() / c.max(1);
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * per..end * per].to_vec(),
        })
    }

    /// Concatenates along the channel axis; all other extents must agree.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err!("concat of zero tensors"))?;
        let tail = &first.shape[1..];
        let mut c = 0;
        for p in parts {
            if p.rank() != first.rank() || &p.shape[1..] != tail {
                return Err(shape_err!(
                    "concat spatial mismatch {:?} vs {:?}",
                    first.shape,
                    p.shape
                ));
            }
            c += p.shape[0];
        }
        let mut shape = first.shape.clone();
        shape[0] = c;
        let mut data = Vec::with_capacity(shape.iter().product());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Self { shape, data })
    }

    /// Selects batch item `i` of a `[C, B, H, W]` tensor as `[C, H, W]`.
    pub fn batch_item(&self, i: usize) -> Result<Self> {
        let d = self.dims4()?;
        if i >= d.b {
            return Err(shape_err!("batch index {} out of range {}", i, d.b));
        }
        let plane = d.plane();
        let mut data = Vec::with_capacity(d.c * plane);
        for c in 0..d.c {
            let off = (c * d.b + i) * plane;
            data.extend_from_slice(&self.data[off..off + plane]);
        }
        Ok(Self {
            shape: vec![d.c, d.h, d.w],
            data,
        })
    }

    /// Stacks `[C, H, W]` images into one `[C, B, H, W]` batch.
    pub fn stack_batch(items: &[Self]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| shape_err!("empty batch"))?;
        let d = first.dims4()?;
        let b = items.len();
        let plane = d.plane();
        let mut data = vec![T::zero(); d.c * b * plane];
        for (i, it) in items.iter().enumerate() {
            let di = it.dims4()?;
            if di.c != d.c || di.h != d.h || di.w != d.w || di.b != 1 {
                return Err(shape_err!("batch item {:?} vs {:?}", it.shape, first.shape));
            }
            for c in 0..d.c {
                let dst = (c * b + i) * plane;
                data[dst..dst + plane].copy_from_slice(&it.data[c * plane..(c + 1) * plane]);
            }
        }
        Ok(Self {
            shape: vec![d.c, b, d.h, d.w],
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn concat_then_slice_recovers_parts() {
        let a = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[3, 3, 4], |i| -(i as f64));
        let ab = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(ab.shape(), &[5, 3, 4]);
        assert_eq!(ab.slice_channels(0, 2).unwrap(), a);
        assert_eq!(ab.slice_channels(2, 5).unwrap(), b);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3, 4]);
        let b = Tensor::<f64>::zeros(&[2, 4, 3]);
        assert!(Tensor::concat_channels(&[&a, &b]).is_err());
    }

    #[test]
    fn stack_and_unstack_batch() {
        let xs: Vec<_> = (0..3)
            .map(|k| Tensor::<f32>::from_fn(&[2, 2, 2], |i| (k * 10 + i) as f32))
            .collect();
        let b = Tensor::stack_batch(&xs).unwrap();
        assert_eq!(b.shape(), &[2, 3, 2, 2]);
        for (k, x) in xs.iter().enumerate() {
            assert_eq!(&b.batch_item(k).unwrap(), x);
        }
    }
}
