use super::{accumulate, Graph, Node, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub(crate) struct DiceSaved<T> {
    pred: Var,
    target: Vec<T>,
    intersection: f64,
    denominator: f64,
}

impl<T: Scalar> Graph<T> {
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::ZERO { v } else { T::ZERO });
        let rg = self.requires_grad(x);
        self.push(out, rg, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.requires_grad(x);
        self.push(out, rg, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::from_vec(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    /// `scale * x + shift`, elementwise with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        let rg = self.requires_grad(x);
        self.push(out, rg, Op::Affine { input: x, scale })
    }

    /// Stacks the channels of `a` followed by those of `b` (axis 1).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::shape(format!(
                "concat_channels needs matching non-channel extents, got {sa:?} and {sb:?}"
            )));
        }
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let inner: usize = sa[2..].iter().product();
        let mut shape = sa.to_vec();
        shape[1] = ca + cb;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ca + cb) * inner);
        for i in 0..n {
            data.extend_from_slice(&va[i * ca * inner..(i + 1) * ca * inner]);
            data.extend_from_slice(&vb[i * cb * inner..(i + 1) * cb * inner]);
        }
        let out = Tensor::from_vec(shape, data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Concat { a, b }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self
            .value(x)
            .data()
            .iter()
            .fold(T::ZERO, |acc, &v| acc + v);
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().fold(T::ZERO, |acc, &e| acc + e);
        let m = s / T::from_f64(v.numel() as f64);
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(m), rg, Op::Mean(x))
    }

    /// Soft Dice loss `1 - 2 Σ s·g / (Σ s² + Σ g² + eps)` against a constant
    /// target. Sums are accumulated in `f64` in buffer order.
    pub fn dice_loss(&mut self, pred: Var, target: &Tensor<T>, eps: f64) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::shape(format!(
                "dice_loss shapes differ: prediction {:?}, target {:?}",
                self.shape(pred),
                target.shape()
            )));
        }
        let (mut inter, mut ss, mut gg) = (0.0f64, 0.0f64, 0.0f64);
        for (&s, &g) in self.value(pred).data().iter().zip(target.data()) {
            let (s, g) = (s.as_f64(), g.as_f64());
            inter += s * g;
            ss += s * s;
            gg += g * g;
        }
        let denominator = ss + gg + eps;
        if denominator <= 0.0 {
            return Err(Error::NonFinite(
                "dice_loss denominator is zero (empty prediction and target with eps = 0)".into(),
            ));
        }
        let loss = 1.0 - 2.0 * inter / denominator;
        let rg = self.requires_grad(pred);
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            rg,
            Op::Dice(DiceSaved {
                pred,
                target: target.data().to_vec(),
                intersection: inter,
                denominator,
            }),
        ))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "{what} needs identical shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::ZERO {
        T::ONE / (T::ONE + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::ONE + e)
    }
}

pub(super) fn concat_backward<T: Scalar>(nodes: &mut [Node<T>], a: Var, b: Var, grad: &[T]) {
    let sa = nodes[a.0].value.shape().to_vec();
    let cb = nodes[b.0].value.shape()[1];
    let (n, ca) = (sa[0], sa[1]);
    let inner: usize = sa[2..].iter().product();
    let width = (ca + cb) * inner;
    accumulate(nodes, a, |_, g| {
        for i in 0..n {
            let src = &grad[i * width..i * width + ca * inner];
            for (gi, &up) in g[i * ca * inner..(i + 1) * ca * inner].iter_mut().zip(src) {
                *gi += up;
            }
        }
    });
    accumulate(nodes, b, |_, g| {
        for i in 0..n {
            let src = &grad[i * width + ca * inner..(i + 1) * width];
            for (gi, &up) in g[i * cb * inner..(i + 1) * cb * inner].iter_mut().zip(src) {
                *gi += up;
            }
        }
    });
}

pub(super) fn dice_backward<T: Scalar>(nodes: &mut [Node<T>], saved: &DiceSaved<T>, grad: &[T]) {
    let up = grad[0].as_f64();
    let d = saved.denominator;
    let i = saved.intersection;
    accumulate(nodes, saved.pred, |pv, g| {
        for ((gi, &s), &t) in g.iter_mut().zip(pv.data()).zip(&saved.target) {
            let (s, t) = (s.as_f64(), t.as_f64());
            let dl = -2.0 * t / d + 4.0 * i * s / (d * d);
            *gi += T::from_f64(up * dl);
        }
    });
}
