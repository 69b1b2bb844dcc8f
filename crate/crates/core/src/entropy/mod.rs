//! Probability modelling of the latents: quantization, the discretized
//! Gaussian conditional, the factorized hyper-prior, the coding tables and
//! the channel-wise autoregressive parameter networks.

pub mod charm;
pub mod factorized;
pub mod tables;

use rand::Rng;

use crate::autodiff::Backend;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use charm::{Charm, SliceNet};
pub use factorized::FactorizedPrior;
pub use tables::{cdf_for_scale, gaussian_tables, QuantizedCdf, ScaleTable};

pub const SIGMA_MIN: f64 = tables::SCALE_MIN;
pub const SIGMA_MAX: f64 = tables::SCALE_MAX;
/// Lower bound on every likelihood, `2^-24`.
pub const LIKELIHOOD_FLOOR: f64 = 1.0 / (1u64 << 24) as f64;

/// Even partition of `M` latent channels into `G` contiguous slices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SliceLayout {
    m: usize,
    groups: usize,
}

impl SliceLayout {
    pub fn new(m: usize, groups: usize) -> Result<Self> {
        if groups == 0 || m == 0 || !m.is_multiple_of(groups) {
            return Err(Error::Config(format!("{m} channels cannot be split evenly into {groups} slices")));
        }
        Ok(Self { m, groups })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn channels_per_slice(&self) -> usize {
        self.m / self.groups
    }

    /// Channel range `[start, end)` of slice `k`.
    pub fn range(&self, k: usize) -> std::ops::Range<usize> {
        let c = self.channels_per_slice();
        k * c..(k + 1) * c
    }

    pub fn ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        (0..self.groups).map(|k| self.range(k))
    }
}

pub fn slice_partition(m: usize, groups: usize) -> Result<SliceLayout> {
    SliceLayout::new(m, groups)
}

/// Mean and (clamped) scale of a discretized Gaussian.
#[derive(Clone, Debug)]
pub struct GaussianParams<V> {
    pub mean: V,
    pub scale: V,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuantMode {
    /// Additive uniform noise in `[-1/2, 1/2)`.
    Train,
    /// Mean-subtracted rounding.
    Code,
}

/// `y + u` in train mode, `round(y - mean) + mean` in code mode.
pub fn quantize<T: Scalar, R: Rng + ?Sized>(
    y: &Tensor<T>,
    mean: &Tensor<T>,
    mode: QuantMode,
    rng: &mut R,
) -> Result<Tensor<T>> {
    y.same_shape(mean)?;
    Ok(match mode {
        QuantMode::Train => Tensor::from_fn(y.shape(), |i| y.data()[i] + T::cst(rng.gen_range(-0.5..0.5))),
        QuantMode::Code => y.zip_map(mean, |v, m| (v - m).round() + m)?,
    })
}

/// Integer symbols `round(y - mean)` in code mode.
pub fn symbols<T: Scalar>(y: &Tensor<T>, mean: &Tensor<T>) -> Result<Vec<i64>> {
    y.same_shape(mean)?;
    Ok(y.data()
        .iter()
        .zip(mean.data())
        .map(|(&v, &m)| (v - m).round().f64() as i64)
        .collect())
}

/// `Phi((v - mu + 1/2) / sigma) - Phi((v - mu - 1/2) / sigma)`, floored at
/// `2^-24`. Evaluated on the lower tail to avoid cancellation.
pub fn gaussian_likelihood<T: Scalar, B: Backend<T>>(
    b: &mut B,
    v: &B::Var,
    params: &GaussianParams<B::Var>,
) -> Result<B::Var> {
    let d = b.sub(v, &params.mean)?;
    let sign = b.value(&d).map(|x| if x < T::zero() { -T::one() } else { T::one() });
    let sign = b.constant(sign);
    let ad = b.mul(&d, &sign)?;
    let neg = b.scale(&ad, -1.0)?;
    let up = b.add_scalar(&neg, 0.5)?;
    let lo = b.add_scalar(&neg, -0.5)?;
    let up = b.div(&up, &params.scale)?;
    let lo = b.div(&lo, &params.scale)?;
    let up = b.normal_cdf(&up)?;
    let lo = b.normal_cdf(&lo)?;
    let p = b.sub(&up, &lo)?;
    b.clamp(&p, LIKELIHOOD_FLOOR, 1.0)
}

/// `-sum(log2 p)`.
pub fn bits_of<T: Scalar, B: Backend<T>>(b: &mut B, likelihood: &B::Var) -> Result<B::Var> {
    let l = b.ln(likelihood)?;
    let s = b.sum(&l)?;
    b.scale(&s, -1.0 / std::f64::consts::LN_2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eager;
    use crate::params::ParamStore;
    use rand::SeedableRng;

    fn lik(v: f64, mu: f64, sigma: f64) -> f64 {
        let store = ParamStore::<f64>::new();
        let mut e = Eager::new(&store);
        let v = e.constant(Tensor::scalar(v));
        let p = GaussianParams {
            mean: e.constant(Tensor::scalar(mu)),
            scale: e.constant(Tensor::scalar(sigma)),
        };
        gaussian_likelihood(&mut e, &v, &p).unwrap().data()[0]
    }

    #[test]
    fn partitions() {
        let l = slice_partition(320, 5).unwrap();
        assert_eq!(l.channels_per_slice(), 64);
        assert_eq!(slice_partition(320, 10).unwrap().channels_per_slice(), 32);
        let l = slice_partition(40, 5).unwrap();
        let ranges: Vec<_> = l.ranges().collect();
        assert_eq!(ranges, vec![0..8, 8..16, 16..24, 24..32, 32..40]);
        assert!(slice_partition(40, 3).is_err());
    }

    #[test]
    fn code_mode_rounds_around_mean() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let y = Tensor::<f64>::new(vec![2], vec![2.4, 2.4]).unwrap();
        let mu = Tensor::new(vec![2], vec![0.0, 2.3]).unwrap();
        let q = quantize(&y, &mu, QuantMode::Code, &mut rng).unwrap();
        assert_eq!(q.data()[0], 2.0);
        assert!((q.data()[1] - 2.3).abs() < 1e-15);
    }

    #[test]
    fn likelihood_reference_values() {
        // Phi(0.5) - Phi(-0.5)
        assert!((lik(0.0, 0.0, 1.0) - 0.382924922548026).abs() < 1e-12);
        assert_eq!(lik(10.0, 0.0, 0.11), LIKELIHOOD_FLOOR);
        for &(v, mu, s) in &[(1.3, 0.4, 0.7), (-5.0, 2.0, 3.0), (0.2, 0.25, 0.11)] {
            assert!((lik(v, mu, s) - lik(v - mu, 0.0, s)).abs() < 1e-12);
        }
    }

    #[test]
    fn half_likelihoods_give_one_bit_each() {
        let store = ParamStore::<f64>::new();
        let mut e = Eager::new(&store);
        let p = e.constant(Tensor::full(&[7, 3], 0.5));
        let bits = bits_of(&mut e, &p).unwrap();
        assert!((bits.data()[0] - 21.0).abs() < 1e-12);
    }

    #[test]
    fn sharper_scale_cheaper_when_mean_is_right() {
        assert!(lik(0.0, 0.0, 0.2) > lik(0.0, 0.0, 1.0));
    }

    proptest::proptest! {
        #[test]
        fn train_noise_is_bounded(vals in proptest::collection::vec(-100.0f64..100.0, 1..64), seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let y = Tensor::new(vec![vals.len()], vals).unwrap();
            let q = quantize(&y, &Tensor::zeros(y.shape()), QuantMode::Train, &mut rng).unwrap();
            for (a, b) in q.data().iter().zip(y.data()) {
                proptest::prop_assert!((a - b).abs() <= 0.5);
            }
        }
    }
}
