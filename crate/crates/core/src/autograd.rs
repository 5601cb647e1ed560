//! Reverse-mode differentiation over a Wengert tape.
//!
//! Every op appends one node holding its value. [`Tape::backward`] walks the
//! nodes in exact reverse order of execution, summing gradient contributions
//! for tensors consumed by more than one op.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, BinaryOp, NormCache, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Binary(Var, Var, BinaryOp),
    Scale(Var, T),
    Transpose(Var, usize, usize),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Softmax(Var, usize),
    LayerNorm { x: Var, gain: Var, bias: Var, cache: NormCache<T> },
    Gelu(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    Sum(Var),
    SumAxis(Var, usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Ordered op record sufficient to run a backward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// require gradients or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::matmul_forward(self.value(a), self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::MatMul(a, b), ng))
    }

    /// Broadcasting elementwise sum.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let y = tensor::binary_forward(self.value(a), self.value(b), op)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(y, Op::Binary(a, b, op), ng))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let y = self.value(a).scale(c).ensure_finite("scale")?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(y, Op::Scale(a, c), ng))
    }

    /// `a - b`, composed from [`Tape::scale`] and [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -T::one())?;
        self.add(a, nb)
    }

    pub fn transpose(&mut self, a: Var, ax0: usize, ax1: usize) -> Result<Var> {
        let y = tensor::transpose_forward(self.value(a), ax0, ax1)?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(y, Op::Transpose(a, ax0, ax1), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(a).reshape(shape)?;
        let ng = self.any_grad(&[a]);
        Ok(self.push(y, Op::Reshape(a), ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = tensor::concat_forward(&values, axis)?;
        let ng = self.any_grad(parts);
        Ok(self.push(y, Op::Concat(parts.to_vec(), axis), ng))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let y = tensor::slice_forward(self.value(x), axis, start, len)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(y, Op::Slice { x, axis, start }, ng))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let y = tensor::softmax_forward(self.value(x), axis)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(y, Op::Softmax(x, axis), ng))
    }

    /// Logistic sigmoid composed as the first entry of `softmax([x, 0])`.
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        let mut col = shape.clone();
        col.push(1);
        let xc = self.reshape(x, &col)?;
        let zeros = self.constant(Tensor::zeros(&col)?);
        let axis = col.len() - 1;
        let pair = self.concat(&[xc, zeros], axis)?;
        let sm = self.softmax(pair, axis)?;
        let first = self.slice(sm, axis, 0, 1)?;
        self.reshape(first, &shape)
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (y, cache) = tensor::layer_norm_forward(self.value(x), self.value(gain), self.value(bias), eps)?;
        let ng = self.any_grad(&[x, gain, bias]);
        Ok(self.push(y, Op::LayerNorm { x, gain, bias, cache }, ng))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).gelu().ensure_finite("gelu")?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(y, Op::Gelu(x), ng))
    }

    /// Mean cross-entropy of `logits[B×C]` against integer labels; shape `[1]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = tensor::cross_entropy_forward(self.value(logits), labels)?;
        let ng = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Sum of all entries; shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        if !s.is_finite() {
            return Err(Error::NonFinite("sum"));
        }
        let ng = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), ng))
    }

    /// Mean of all entries; shape `[1]`.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        let s = self.sum(x)?;
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Sum along `axis`, keeping it with length 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return Err(Error::Argument(format!("sum_axis: axis {axis} out of range for {:?}", xv.shape())));
        }
        let (outer, len, inner) = tensor::axis_split(xv.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xv.data()[o * len * inner + j * inner + i];
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = 1;
        let y = Tensor::new(&shape, out)?.ensure_finite("sum_axis")?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(y, Op::SumAxis(x, axis), ng))
    }

    /// Gradients of the scalar `loss` with respect to every recorded value.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape(), g).expect("gradient shape")))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (da, db) = tensor::matmul_backward(self.value(*a), self.value(*b), g)?;
                acc(*a, da);
                acc(*b, db);
            }
            Op::Binary(a, b, op) => {
                let (da, db) = tensor::binary_backward(self.value(*a), self.value(*b), g, node.value.shape(), *op);
                acc(*a, da);
                acc(*b, db);
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|&v| v * *c).collect()),
            Op::Transpose(a, x0, x1) => {
                let (dx, _) = tensor::swap_axes(g, node.value.shape(), *x0, *x1);
                acc(*a, dx);
            }
            Op::Reshape(a) => acc(*a, g.to_vec()),
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = tensor::axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).shape()[*axis];
                    let mut dp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        dp.extend_from_slice(&g[base..base + len * inner]);
                    }
                    offset += len;
                    acc(*p, dp);
                }
            }
            Op::Slice { x, axis, start } => {
                let xv = self.value(*x);
                let (outer, full, inner) = tensor::axis_split(xv.shape(), *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![T::zero(); xv.numel()];
                for o in 0..outer {
                    let base = o * full * inner + start * inner;
                    dx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, dx);
            }
            Op::Softmax(x, axis) => acc(*x, tensor::softmax_backward(&node.value, g, *axis)),
            Op::LayerNorm { x, gain, bias, cache } => {
                let (dx, dg, db) = tensor::layer_norm_backward(cache, self.value(*gain), g);
                acc(*x, dx);
                acc(*gain, dg);
                acc(*bias, db);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                acc(*x, xv.data().iter().zip(g).map(|(&v, &gv)| gv * tensor::gelu_grad(v)).collect());
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = self.value(*logits).shape()[1];
                acc(*logits, tensor::cross_entropy_backward(probs, labels, classes, g[0]));
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::SumAxis(x, axis) => {
                let xv = self.value(*x);
                let (outer, len, inner) = tensor::axis_split(xv.shape(), *axis);
                let mut dx = vec![T::zero(); xv.numel()];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            dx[o * len * inner + j * inner + i] = g[o * inner + i];
                        }
                    }
                }
                acc(*x, dx);
            }
        }
        Ok(())
    }
}
