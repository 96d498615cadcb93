use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::tape::Var;
use crate::numerics::tensor::{numel, Scalar, Tensor};

/// Output shape of a same-rank broadcast, where each axis pair is equal or
/// one side is 1.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(Error::shape(op, a, b));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, _) => Ok(y),
            (_, 1) => Ok(x),
            _ => Err(Error::shape(op, a, b)),
        })
        .collect()
}

fn strides_for(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = if shape[i] == 1 && out[i] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of `out`.
fn for_each_broadcast(out: &[usize], a: &[usize], b: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let sa = strides_for(a, out);
    let sb = strides_for(b, out);
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia, ib) = (sa[rank - 1], sb[rank - 1]);
    let outer = numel(out) / inner;
    let mut idx = vec![0usize; rank];
    let mut o = 0;
    for _ in 0..outer {
        let base_a: usize = (0..rank - 1).map(|d| idx[d] * sa[d]).sum();
        let base_b: usize = (0..rank - 1).map(|d| idx[d] * sb[d]).sum();
        for j in 0..inner {
            f(o, base_a + j * ia, base_b + j * ib);
            o += 1;
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Sums `grad` over the axes along which `shape` was broadcast.
pub fn reduce_to_shape<S: Scalar>(grad: &Tensor<S>, shape: &[usize]) -> Tensor<S> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(shape);
    let g = grad.data();
    let od = out.data_mut();
    for_each_broadcast(grad.shape(), shape, shape, |i, off, _| od[off] += g[i]);
    out
}

fn binary<'t, S: Scalar>(
    op: &'static str,
    a: Var<'t, S>,
    b: Var<'t, S>,
    f: impl Fn(S, S) -> S,
    backward: impl Fn(&Tensor<S>, &Tensor<S>, &Tensor<S>) -> (Option<Tensor<S>>, Option<Tensor<S>>) + 'static,
) -> Result<Var<'t, S>> {
    let (av, bv) = (a.value(), b.value());
    let out_shape = broadcast_shape(op, av.shape(), bv.shape())?;
    let mut out = Tensor::zeros(&out_shape);
    {
        let (ad, bd, od) = (av.data(), bv.data(), out.data_mut());
        if av.shape() == bv.shape() {
            for i in 0..od.len() {
                od[i] = f(ad[i], bd[i]);
            }
        } else {
            for_each_broadcast(&out_shape, av.shape(), bv.shape(), |i, x, y| od[i] = f(ad[x], bd[y]));
        }
    }
    a.tape().record(op, out, &[a, b], move |g| {
        let (ga, gb) = backward(g, &av, &bv);
        vec![ga, gb]
    })
}

/// Broadcast `b` to `shape` as a flat buffer.
fn expand<S: Scalar>(b: &Tensor<S>, shape: &[usize]) -> Vec<S> {
    if b.shape() == shape {
        return b.data().to_vec();
    }
    let mut out = vec![S::zero(); numel(shape)];
    let bd = b.data();
    for_each_broadcast(shape, shape, b.shape(), |i, _, y| out[i] = bd[y]);
    out
}

fn unary<'t, S: Scalar>(
    op: &'static str,
    x: Var<'t, S>,
    f: impl Fn(S) -> S,
    // (x, y, g) -> dx
    df: impl Fn(S, S, S) -> S + 'static,
) -> Result<Var<'t, S>> {
    let xv = x.value();
    let out = xv.map(f);
    let yv = Rc::new(out.clone());
    x.tape().record(op, out, &[x], move |g| {
        let mut dx = Tensor::zeros(g.shape());
        for (((d, &xi), &yi), &gi) in dx.data_mut().iter_mut().zip(xv.data()).zip(yv.data()).zip(g.data()) {
            *d = df(xi, yi, gi);
        }
        vec![Some(dx)]
    })
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn add(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        binary("add", self, other, |a, b| a + b, |g, a, b| {
            (Some(reduce_to_shape(g, a.shape())), Some(reduce_to_shape(g, b.shape())))
        })
    }

    pub fn sub(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        binary("sub", self, other, |a, b| a - b, |g, a, b| {
            (Some(reduce_to_shape(g, a.shape())), Some(reduce_to_shape(&g.scale(-S::one()), b.shape())))
        })
    }

    pub fn mul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        binary("mul", self, other, |a, b| a * b, |g, a, b| {
            let shape = g.shape();
            let be = expand(b, shape);
            let ae = expand(a, shape);
            let ga: Vec<S> = g.data().iter().zip(&be).map(|(&g, &b)| g * b).collect();
            let gb: Vec<S> = g.data().iter().zip(&ae).map(|(&g, &a)| g * a).collect();
            let ga = Tensor::new(shape.to_vec(), ga).unwrap();
            let gb = Tensor::new(shape.to_vec(), gb).unwrap();
            (Some(reduce_to_shape(&ga, a.shape())), Some(reduce_to_shape(&gb, b.shape())))
        })
    }

    pub fn scale(self, s: f64) -> Result<Var<'t, S>> {
        let s = S::from_f64(s);
        unary("scale", self, |x| x * s, move |_, _, g| g * s)
    }

    pub fn add_scalar(self, s: f64) -> Result<Var<'t, S>> {
        let s = S::from_f64(s);
        unary("add_scalar", self, |x| x + s, |_, _, g| g)
    }

    pub fn neg(self) -> Result<Var<'t, S>> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Result<Var<'t, S>> {
        unary("exp", self, |x| x.exp(), |_, y, g| g * y)
    }

    pub fn log(self) -> Result<Var<'t, S>> {
        unary("log", self, |x| x.ln(), |x, _, g| g / x)
    }

    pub fn square(self) -> Result<Var<'t, S>> {
        let two = S::from_f64(2.0);
        unary("square", self, |x| x * x, move |x, _, g| g * two * x)
    }

    pub fn tanh(self) -> Result<Var<'t, S>> {
        unary("tanh", self, |x| x.tanh(), |_, y, g| g * (S::one() - y * y))
    }

    pub fn sigmoid(self) -> Result<Var<'t, S>> {
        unary("sigmoid", self, sigmoid, |_, y, g| g * y * (S::one() - y))
    }

    /// Sigmoid-weighted linear unit `x * sigmoid(x)`.
    pub fn silu(self) -> Result<Var<'t, S>> {
        unary("silu", self, |x| x * sigmoid(x), |x, _, g| {
            let s = sigmoid(x);
            g * (s + x * s * (S::one() - s))
        })
    }

    /// `max(x, floor)`; the gradient passes only where `x > floor`.
    pub fn clamp_min(self, floor: f64) -> Result<Var<'t, S>> {
        let f = S::from_f64(floor);
        unary("clamp_min", self, |x| x.max(f), move |x, _, g| if x > f { g } else { S::zero() })
    }

    pub fn sum(self) -> Result<Var<'t, S>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        self.tape().record("sum", Tensor::scalar(xv.sum()), &[self], move |g| {
            vec![Some(Tensor::full(&shape, g.data()[0]))]
        })
    }

    pub fn mean(self) -> Result<Var<'t, S>> {
        let xv = self.value();
        let shape = xv.shape().to_vec();
        let n = S::from_f64(xv.len() as f64);
        self.tape().record("mean", Tensor::scalar(xv.sum() / n), &[self], move |g| {
            vec![Some(Tensor::full(&shape, g.data()[0] / n))]
        })
    }

    /// Mean of squared differences over all elements.
    pub fn mse(self, target: Var<'t, S>) -> Result<Var<'t, S>> {
        let (a, b) = (self.value(), target.value());
        if a.shape() != b.shape() {
            return Err(Error::shape("mse", a.shape(), b.shape()));
        }
        let n = S::from_f64(a.len() as f64);
        let loss = a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<S>() / n;
        self.tape().record("mse", Tensor::scalar(loss), &[self, target], move |g| {
            let k = S::from_f64(2.0) * g.data()[0] / n;
            let d = a.zip_map(&b, |x, y| k * (x - y)).unwrap();
            let nd = d.scale(-S::one());
            vec![Some(d), Some(nd)]
        })
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tape::Tape;

    #[test]
    fn broadcast_add_and_reduce() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::from_f64(vec![2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap(), true);
        let b = tape.leaf(Tensor::from_f64(vec![1, 3], &[10., 20., 30.]).unwrap(), true);
        let c = a.add(b).unwrap();
        assert_eq!(c.value().data(), &[11., 22., 33., 14., 25., 36.]);
        let loss = c.sum().unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(b.grad().unwrap().data(), &[2., 2., 2.]);
        assert_eq!(a.grad().unwrap().data(), &[1.; 6]);
    }

    #[test]
    fn mismatched_shapes_name_both() {
        let tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 4]));
        let err = a.add(b).err().unwrap().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 4]"), "{err}");
    }

    #[test]
    fn square_sum_grad_is_two_w() {
        let tape = Tape::<f64>::new();
        let w = tape.leaf(Tensor::from_f64(vec![2], &[1., 2.]).unwrap(), true);
        let loss = w.mul(w).unwrap().sum().unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(w.grad().unwrap().data(), &[2., 4.]);
    }

    #[test]
    fn log_of_zero_is_flagged() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(x.log(), Err(Error::NonFinite { op: "log" })));
    }
}
