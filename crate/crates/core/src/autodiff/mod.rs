//! Reverse-mode automatic differentiation.
//!
//! Network code is written once against [`Backend`]. [`Graph`] records a
//! tape and can run [`Graph::backward`]; [`Eager`] evaluates directly and
//! drops intermediates as soon as they go out of scope, which is what the
//! inference paths use.

mod ops;

use std::collections::HashMap;
use std::rc::Rc;

pub use ops::Op;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub trait Backend<T: Scalar> {
    type Var: Clone;

    fn constant(&mut self, t: Tensor<T>) -> Self::Var;
    fn param(&mut self, id: ParamId) -> Self::Var;
    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor<T>;
    fn apply(&mut self, op: Op<T>, inputs: &[&Self::Var]) -> Result<Self::Var>;

    fn conv2d(&mut self, x: &Self::Var, kernel: &Self::Var, stride: usize, pad: usize) -> Result<Self::Var> {
        self.apply(Op::Conv2d { stride, pad }, &[x, kernel])
    }
    fn conv_transpose2d(
        &mut self,
        x: &Self::Var,
        kernel: &Self::Var,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Self::Var> {
        self.apply(Op::ConvTranspose2d { stride, pad, out_pad }, &[x, kernel])
    }
    fn add_channel(&mut self, x: &Self::Var, v: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::AddChannel, &[x, v])
    }
    fn mul_channel(&mut self, x: &Self::Var, v: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::MulChannel, &[x, v])
    }
    fn add(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Add, &[a, b])
    }
    fn sub(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Sub, &[a, b])
    }
    fn mul(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Mul, &[a, b])
    }
    fn div(&mut self, a: &Self::Var, b: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Div, &[a, b])
    }
    fn scale(&mut self, x: &Self::Var, s: f64) -> Result<Self::Var> {
        self.apply(Op::Scale(T::cst(s)), &[x])
    }
    fn add_scalar(&mut self, x: &Self::Var, s: f64) -> Result<Self::Var> {
        self.apply(Op::AddScalar(T::cst(s)), &[x])
    }
    fn leaky_relu(&mut self, x: &Self::Var, slope: f64) -> Result<Self::Var> {
        self.apply(Op::LeakyRelu(T::cst(slope)), &[x])
    }
    fn sigmoid(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Sigmoid, &[x])
    }
    fn softplus(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Softplus, &[x])
    }
    fn tanh(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Tanh, &[x])
    }
    fn exp(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Exp, &[x])
    }
    fn ln(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Ln, &[x])
    }
    fn clamp(&mut self, x: &Self::Var, lo: f64, hi: f64) -> Result<Self::Var> {
        self.apply(Op::Clamp { lo: T::cst(lo), hi: T::cst(hi) }, &[x])
    }
    fn normal_cdf(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::NormalCdf, &[x])
    }
    fn concat(&mut self, xs: &[&Self::Var]) -> Result<Self::Var> {
        if xs.len() == 1 {
            return Ok(xs[0].clone());
        }
        self.apply(Op::Concat, xs)
    }
    fn slice_channels(&mut self, x: &Self::Var, start: usize, end: usize) -> Result<Self::Var> {
        self.apply(Op::SliceChannels { start, end }, &[x])
    }
    fn reshape(&mut self, x: &Self::Var, shape: &[usize]) -> Result<Self::Var> {
        self.apply(Op::Reshape(shape.to_vec()), &[x])
    }
    fn sum(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Sum, &[x])
    }
    fn spatial_mean(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::SpatialMean, &[x])
    }
    fn square(&mut self, x: &Self::Var) -> Result<Self::Var> {
        self.apply(Op::Mul, &[x, x])
    }
}

fn checked<T: Scalar>(op: &Op<T>, out: Tensor<T>) -> Result<Tensor<T>> {
    if out.all_finite() {
        Ok(out)
    } else {
        Err(Error::NonFinite(format!("{op:?}")))
    }
}

/// Direct evaluation without a tape.
pub struct Eager<'p, T> {
    params: &'p ParamStore<T>,
    cache: HashMap<ParamId, Rc<Tensor<T>>>,
}

impl<'p, T: Scalar> Eager<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            cache: HashMap::new(),
        }
    }
}

impl<T: Scalar> Backend<T> for Eager<'_, T> {
    type Var = Rc<Tensor<T>>;

    fn constant(&mut self, t: Tensor<T>) -> Self::Var {
        Rc::new(t)
    }

    fn param(&mut self, id: ParamId) -> Self::Var {
        let params = self.params;
        self.cache
            .entry(id)
            .or_insert_with(|| Rc::new(params.get(id).clone()))
            .clone()
    }

    fn value<'a>(&'a self, v: &'a Self::Var) -> &'a Tensor<T> {
        v
    }

    fn apply(&mut self, op: Op<T>, inputs: &[&Self::Var]) -> Result<Self::Var> {
        let xs: Vec<&Tensor<T>> = inputs.iter().map(|v| v.as_ref()).collect();
        let out = ops::forward(&op, &xs)?;
        Ok(Rc::new(checked(&op, out)?))
    }
}

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Node<T> {
    value: Tensor<T>,
    op: Option<Op<T>>,
    inputs: Vec<usize>,
    requires_grad: bool,
}

/// Tape of recorded operations. Single-threaded; one per training step.
pub struct Graph<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, usize>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Option<Op<T>>, inputs: Vec<usize>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient can be queried after [`Graph::backward`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, None, Vec::new(), true)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(op) = &node.op else { continue };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let xs: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let needs: Vec<bool> = node.inputs.iter().map(|&j| self.nodes[j].requires_grad).collect();
            let parts = ops::backward(op, &xs, &node.value, &g, &needs)?;
            for ((&j, part), need) in node.inputs.iter().zip(parts).zip(needs) {
                if !need {
                    continue;
                }
                if let Some(p) = part {
                    match &mut grads[j] {
                        Some(acc) => acc.add_assign(&p)?,
                        slot => *slot = Some(p),
                    }
                }
            }
        }
        let params = self.param_nodes.iter().map(|(&id, &n)| (id, n)).collect();
        Ok(Gradients { grads, params })
    }
}

impl<T: Scalar> Backend<T> for Graph<'_, T> {
    type Var = Var;

    fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, None, Vec::new(), false)
    }

    fn param(&mut self, id: ParamId) -> Var {
        if let Some(&n) = self.param_nodes.get(&id) {
            return Var(n);
        }
        let v = self.push(self.params.get(id).clone(), None, Vec::new(), true);
        self.param_nodes.insert(id, v.0);
        v
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor<T> {
        &self.nodes[v.0].value
    }

    fn apply(&mut self, op: Op<T>, inputs: &[&Var]) -> Result<Var> {
        let xs: Vec<&Tensor<T>> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = checked(&op, ops::forward(&op, &xs)?)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let idx = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(out, Some(op), idx, requires_grad))
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to a leaf (`None` if unreachable).
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(id, n)| self.grads[n].as_ref().map(|g| (id, g)))
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (id, g) in self.param_grads() {
            store.accumulate_grad(id, g)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_all_ones() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::from_fn(&[2, 3, 4], |i| i as f64 - 7.0));
        let s = g.sum(&x).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.wrt(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_sum_of_squares_gradient_is_x() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let t = Tensor::from_fn(&[5, 2], |i| (i as f64).sin());
        let x = g.input(t.clone());
        let sq = g.square(&x).unwrap();
        let s = g.sum(&sq).unwrap();
        let l = g.scale(&s, 0.5).unwrap();
        let grads = g.backward(l).unwrap();
        let gx = grads.wrt(x).unwrap();
        for (a, b) in gx.data().iter().zip(t.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let store = ParamStore::<f32>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::zeros(&[3]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates_in_store() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_fn(&[3], |i| i as f64)).unwrap();
        let grads = {
            let mut g = Graph::new(&store);
            let w = g.param(id);
            let s = g.sum(&w).unwrap();
            g.backward(s).unwrap().param_grads().map(|(i, t)| (i, t.clone())).collect::<Vec<_>>()
        };
        for _ in 0..2 {
            for (i, t) in &grads {
                store.accumulate_grad(*i, t).unwrap();
            }
        }
        assert_eq!(store.grad(id).data(), &[2.0, 2.0, 2.0]);
        store.zero_grad();
        assert_eq!(store.grad(id).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let store = ParamStore::<f64>::new();
        let mut e = Eager::new(&store);
        let x = e.constant(Tensor::scalar(0.0));
        assert!(matches!(e.ln(&x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn concat_gradient_splits_back() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::zeros(&[2, 2, 2]));
        let b = g.input(Tensor::zeros(&[3, 2, 2]));
        let c = g.concat(&[&a, &b]).unwrap();
        let w = g.constant(Tensor::from_fn(&[5, 2, 2], |i| i as f64));
        let p = g.mul(&c, &w).unwrap();
        let s = g.sum(&p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(a).unwrap().data(), &[0., 1., 2., 3., 4., 5., 6., 7.]);
        assert_eq!(grads.wrt(b).unwrap().data()[0], 8.0);
    }
}
