//! Learned per-channel factorized prior for the hyper-latent.
//!
//! Each channel owns a monotone map `f = f3 . f2 . f1` with
//! `fi(x) = u + tanh(a) * tanh(u)`, `u = softplus(w) * x + b`, and the CDF is
//! `sigmoid(f(x))`. With `softplus(w) = 1` and `a = b = 0` every stage is the
//! identity, so the prior starts as a unit logistic.

use rand::Rng;

use super::tables::QuantizedCdf;
use super::LIKELIHOOD_FLOOR;
use crate::autodiff::Backend;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PRIOR_STAGES: usize = 3;
/// Symbols of the hyper-latent tables are searched within `+-PRIOR_RADIUS`.
pub const PRIOR_RADIUS: i32 = 256;
const TAIL_MASS: f64 = 1.0 / (1u64 << 18) as f64;

#[derive(Clone, Debug)]
struct Stage {
    w: ParamId,
    b: ParamId,
    a: ParamId,
}

#[derive(Clone, Debug)]
pub struct FactorizedPrior {
    channels: usize,
    stages: Vec<Stage>,
}

impl FactorizedPrior {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        _rng: &mut R,
    ) -> Result<Self> {
        // softplus^-1(1) = ln(e - 1)
        let unit = (std::f64::consts::E - 1.0).ln();
        let stages = (0..PRIOR_STAGES)
            .map(|i| {
                Ok(Stage {
                    w: store.add(format!("{name}.s{i}.w"), Tensor::full(&[channels], T::cst(unit)))?,
                    b: store.zeros(format!("{name}.s{i}.b"), channels)?,
                    a: store.zeros(format!("{name}.s{i}.a"), channels)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { channels, stages })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Logit of the CDF, `f(x)`, applied per channel.
    pub fn logits<T: Scalar, B: Backend<T>>(&self, b: &mut B, x: &B::Var) -> Result<B::Var> {
        let mut h = x.clone();
        for st in &self.stages {
            let w = b.param(st.w);
            let w = b.softplus(&w)?;
            let bias = b.param(st.b);
            let a = b.param(st.a);
            let a = b.tanh(&a)?;
            let u = b.mul_channel(&h, &w)?;
            let u = b.add_channel(&u, &bias)?;
            let t = b.tanh(&u)?;
            let t = b.mul_channel(&t, &a)?;
            h = b.add(&u, &t)?;
        }
        Ok(h)
    }

    /// `C(v + 1/2) - C(v - 1/2)` per element, floored.
    pub fn likelihood<T: Scalar, B: Backend<T>>(&self, b: &mut B, v: &B::Var) -> Result<B::Var> {
        if b.value(v).channels() != self.channels {
            return Err(Error::InvalidShape(format!(
                "prior has {} channels, input {:?}",
                self.channels,
                b.value(v).shape()
            )));
        }
        let up = b.add_scalar(v, 0.5)?;
        let lo = b.add_scalar(v, -0.5)?;
        let up = self.logits(b, &up)?;
        let lo = self.logits(b, &lo)?;
        // Evaluate in the tail where sigmoid is small to avoid cancellation.
        let sum = b.add(&up, &lo)?;
        let sign = b.value(&sum).map(|s| if s > T::zero() { -T::one() } else { T::one() });
        let sign = b.constant(sign);
        let up = b.mul(&up, &sign)?;
        let lo = b.mul(&lo, &sign)?;
        let up = b.sigmoid(&up)?;
        let lo = b.sigmoid(&lo)?;
        let diff = b.sub(&up, &lo)?;
        let p = b.mul(&diff, &sign)?;
        b.clamp(&p, LIKELIHOOD_FLOOR, 1.0)
    }

    /// CDF of one channel in f64 at the points `xs`.
    fn cdf_f64<T: Scalar>(&self, store: &ParamStore<T>, channel: usize, xs: &[f64]) -> Vec<f64> {
        let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
        let params: Vec<(f64, f64, f64)> = self
            .stages
            .iter()
            .map(|st| {
                (
                    softplus(store.get(st.w).data()[channel].f64()),
                    store.get(st.b).data()[channel].f64(),
                    store.get(st.a).data()[channel].f64().tanh(),
                )
            })
            .collect();
        xs.iter()
            .map(|&x| {
                let mut h = x;
                for &(w, bias, a) in &params {
                    let u = w * h + bias;
                    h = u + a * u.tanh();
                }
                1.0 / (1.0 + (-h).exp())
            })
            .collect()
    }

    /// Coding table for one channel: the integer support where the pmf
    /// carries mass above a tiny tail threshold, plus escape.
    pub fn channel_table<T: Scalar>(&self, store: &ParamStore<T>, channel: usize) -> Result<QuantizedCdf> {
        let r = PRIOR_RADIUS;
        let edges: Vec<f64> = (-r..=r + 1).map(|v| v as f64 - 0.5).collect();
        let cdf = self.cdf_f64(store, channel, &edges);
        // cdf[i] = C(i - r - 1/2)
        let lo = (0..cdf.len() - 1).find(|&i| cdf[i + 1] > TAIL_MASS).unwrap_or(r as usize);
        let hi = (1..cdf.len()).rev().find(|&i| 1.0 - cdf[i - 1] > TAIL_MASS).unwrap_or(r as usize + 1);
        let hi = hi.max(lo + 1);
        let mut pmf: Vec<f64> = (lo..hi).map(|i| (cdf[i + 1] - cdf[i]).max(0.0)).collect();
        pmf.push(cdf[lo] + (1.0 - cdf[hi]));
        QuantizedCdf::from_pmf(lo as i32 - r, &pmf)
    }

    pub fn tables<T: Scalar>(&self, store: &ParamStore<T>) -> Result<Vec<QuantizedCdf>> {
        (0..self.channels).map(|c| self.channel_table(store, c)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eager;
    use rand::SeedableRng;

    fn prior(c: usize) -> (FactorizedPrior, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let p = FactorizedPrior::new(&mut store, "prior", c, &mut rng).unwrap();
        (p, store)
    }

    fn lik(p: &FactorizedPrior, store: &ParamStore<f64>, v: Tensor<f64>) -> Tensor<f64> {
        let mut e = Eager::new(store);
        let v = e.constant(v);
        (*p.likelihood(&mut e, &v).unwrap()).clone()
    }

    #[test]
    fn init_is_unit_logistic() {
        let (p, store) = prior(2);
        let l = lik(&p, &store, Tensor::zeros(&[2, 1, 1]));
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let want = sig(0.5) - sig(-0.5);
        assert!((l.data()[0] - want).abs() < 1e-12);
        assert!((want - 0.2449).abs() < 1e-4);
    }

    #[test]
    fn pmf_sums_to_one_over_integers() {
        let (p, mut store) = prior(1);
        let ids: Vec<_> = store.ids().collect();
        // Non-trivial shape: shifted, skewed.
        store.set(ids[1], Tensor::full(&[1], 0.7)).unwrap();
        store.set(ids[2], Tensor::full(&[1], 0.4)).unwrap();
        store.set(ids[3], Tensor::full(&[1], -0.3)).unwrap();
        let v = Tensor::from_fn(&[1, 1, 201], |i| i as f64 - 100.0);
        let l = lik(&p, &store, v);
        assert!((l.sum() - 1.0).abs() < 1e-3);
        assert!(l.data().iter().all(|&x| x > 0.0));
    }

    #[test]
    fn channel_table_is_valid() {
        let (p, store) = prior(3);
        for t in p.tables(&store).unwrap() {
            assert!(t.offset() < 0);
            assert!(t.index_of(0).is_some());
            assert!((0..t.len()).all(|i| t.freq(i) >= 1));
        }
    }
}
