//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] owns every value computed during a forward pass. Nodes are
//! appended in evaluation order, so the append order is already a topological
//! order and [`Graph::backward`] simply walks the tape in reverse.

mod conv;
mod norm;
mod pointwise;
mod pool;

pub use conv::{conv_output_extent, Padding};
pub use norm::{BatchNormMode, RunningStats, BN_EPSILON, BN_MOMENTUM};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Conv(conv::ConvSaved),
    MaxPool(pool::MaxPoolSaved),
    Upsample(pool::UpsampleSaved),
    BatchNorm(norm::BatchNormSaved<T>),
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Affine { input: Var, scale: T },
    Concat { a: Var, b: Var },
    Sum(Var),
    Mean(Var),
    Dice(pointwise::DiceSaved<T>),
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) grad: Option<Vec<T>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op<T>,
}

/// Append-only tape of tensor operations.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input (no gradient is accumulated for it).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient; zeros when the value did not influence the loss.
    pub fn grad(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => Tensor::from_vec(node.value.shape().to_vec(), g.clone())
                .expect("gradient shape mirrors value shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Propagates d(loss)/d(value) to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let numel = self.nodes[loss.0].value.numel();
        if numel != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {numel} elements"
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::ONE]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = node.grad.take() else {
                continue;
            };
            backward_node(before, node, &grad);
            node.grad = Some(grad);
        }
        Ok(())
    }
}

/// Adds `f`'s contribution into the gradient buffer of `v`, allocating it on
/// first use. Skips values that do not require gradients.
pub(crate) fn accumulate<T: Scalar>(
    nodes: &mut [Node<T>],
    v: Var,
    f: impl FnOnce(&Tensor<T>, &mut [T]),
) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let numel = node.value.numel();
    let grad = node.grad.get_or_insert_with(|| vec![T::ZERO; numel]);
    f(&node.value, grad);
}

fn backward_node<T: Scalar>(before: &mut [Node<T>], node: &Node<T>, grad: &[T]) {
    match &node.op {
        Op::Leaf => {}
        Op::Conv(saved) => conv::backward(before, saved, grad),
        Op::MaxPool(saved) => pool::max_pool_backward(before, saved, grad),
        Op::Upsample(saved) => pool::upsample_backward(before, saved, grad),
        Op::BatchNorm(saved) => norm::backward(before, saved, grad),
        Op::Relu(x) => accumulate(before, *x, |xv, g| {
            for ((gi, &xi), &up) in g.iter_mut().zip(xv.data()).zip(grad) {
                if xi > T::ZERO {
                    *gi += up;
                }
            }
        }),
        Op::Sigmoid(x) => {
            let y = node.value.data();
            accumulate(before, *x, |_, g| {
                for ((gi, &yi), &up) in g.iter_mut().zip(y).zip(grad) {
                    *gi += up * yi * (T::ONE - yi);
                }
            })
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                accumulate(before, v, |_, g| {
                    for (gi, &up) in g.iter_mut().zip(grad) {
                        *gi += up;
                    }
                });
            }
        }
        Op::Mul(a, b) => {
            let (a, b) = (*a, *b);
            if a == b {
                accumulate(before, a, |av, g| {
                    for ((gi, &ai), &up) in g.iter_mut().zip(av.data()).zip(grad) {
                        *gi += up * (ai + ai);
                    }
                });
            } else {
                let bv = before[b.0].value.data().to_vec();
                accumulate(before, a, |_, g| {
                    for ((gi, &bi), &up) in g.iter_mut().zip(&bv).zip(grad) {
                        *gi += up * bi;
                    }
                });
                let av = before[a.0].value.data().to_vec();
                accumulate(before, b, |_, g| {
                    for ((gi, &ai), &up) in g.iter_mut().zip(&av).zip(grad) {
                        *gi += up * ai;
                    }
                });
            }
        }
        Op::Affine { input, scale } => accumulate(before, *input, |_, g| {
            for (gi, &up) in g.iter_mut().zip(grad) {
                *gi += up * *scale;
            }
        }),
        Op::Concat { a, b } => pointwise::concat_backward(before, *a, *b, grad),
        Op::Sum(x) => accumulate(before, *x, |_, g| {
            for gi in g.iter_mut() {
                *gi += grad[0];
            }
        }),
        Op::Mean(x) => accumulate(before, *x, |xv, g| {
            let scale = grad[0] / T::from_f64(xv.numel() as f64);
            for gi in g.iter_mut() {
                *gi += scale;
            }
        }),
        Op::Dice(saved) => pointwise::dice_backward(before, saved, grad),
    }
}
