//! Bias-corrected Adam.

use crate::error::{shape_err, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>) -> Self {
        Self::with_hyper(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(params: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|(_, _, p)| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    /// One update of every parameter from the store's accumulated gradients.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(shape_err!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                params.len()
            ));
        }
        for id in params.ids() {
            if self.m[id.index()].shape() != params.get(id).shape() {
                return Err(shape_err!("optimizer moment shape mismatch for {}", params.name(id)));
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let step = lr * (1.0 - b2.powi(t)).sqrt() / (1.0 - b1.powi(t));
        let eps_hat = self.eps * (1.0 - b2.powi(t)).sqrt();
        let (b1t, b2t) = (T::cst(b1), T::cst(b2));
        let (c1, c2) = (T::cst(1.0 - b1), T::cst(1.0 - b2));
        let (step, eps_hat) = (T::cst(step), T::cst(eps_hat));
        for id in params.ids().collect::<Vec<_>>() {
            let g = params.grad(id).data().to_vec();
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = b1t * m[i] + c1 * g[i];
                v[i] = b2t * v[i] + c2 * g[i] * g[i];
                // lr * m_hat / (sqrt(v_hat) + eps), rearranged.
                p[i] -= step * m[i] / (v[i].sqrt() + eps_hat);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::full(&[1], v)).unwrap();
        s.accumulate_grad(id, &Tensor::full(&[1], g)).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        for &g in &[1e-3, 0.5, -7.0, 1e4] {
            let mut s = store(1.0, g);
            let mut adam = AdamState::new(&s);
            adam.step(&mut s, 1e-2).unwrap();
            let moved = s.get(s.ids().next().unwrap()).data()[0] - 1.0;
            // closed form: -lr * g / (|g| + eps)
            let want = -1e-2 * g / (g.abs() + 1e-8);
            assert!((moved - want).abs() < 1e-12, "g={g}: {moved} vs {want}");
            assert_eq!(adam.t, 1);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store(3.0, 0.0);
        let mut adam = AdamState::new(&s);
        adam.step(&mut s, 0.1).unwrap();
        assert_eq!(s.get(s.ids().next().unwrap()).data()[0], 3.0);
    }

    #[test]
    fn second_identical_step_not_larger() {
        let mut s = store(0.0, 0.3);
        let mut adam = AdamState::new(&s);
        adam.step(&mut s, 1e-3).unwrap();
        let p1 = s.get(s.ids().next().unwrap()).data()[0];
        adam.step(&mut s, 1e-3).unwrap();
        let p2 = s.get(s.ids().next().unwrap()).data()[0];
        assert!((p2 - p1).abs() <= p1.abs() + 1e-12);
        assert_eq!(adam.t, 2);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let s = store(0.0, 1.0);
        let mut adam = AdamState::new(&s);
        let mut other = ParamStore::<f64>::new();
        other.add("p", Tensor::zeros(&[2])).unwrap();
        assert!(adam.step(&mut other, 1e-3).is_err());
    }
}
