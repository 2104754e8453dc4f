//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of nodes. Every node's inputs were
//! appended before it, so the node order is already a topological order and
//! the reverse sweep is a single backwards pass over the list.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    MaxPool2d,
    GlobalAvgPool,
    Relu,
    Sigmoid,
    BatchNormTrain,
    BatchNormEval,
    Linear,
    Add,
    ScaleChannels,
    ConcatChannels,
    Reshape,
    SoftmaxCrossEntropy,
    Sum,
    WeightedSum,
}

enum Op<T> {
    Leaf,
    Conv2d { stride: usize, padding: usize },
    MaxPool2d { argmax: Vec<usize> },
    GlobalAvgPool,
    Relu,
    Sigmoid,
    BatchNorm { normalized: Tensor<T>, inv_std: Vec<T>, train: bool },
    Linear,
    Add,
    ScaleChannels,
    ConcatChannels { widths: Vec<usize> },
    Reshape,
    SoftmaxCrossEntropy { probs: Tensor<T>, labels: Vec<usize> },
    Sum,
    WeightedSum { weights: Tensor<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2d { .. } => OpKind::MaxPool2d,
            Op::GlobalAvgPool => OpKind::GlobalAvgPool,
            Op::Relu => OpKind::Relu,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::BatchNorm { train: true, .. } => OpKind::BatchNormTrain,
            Op::BatchNorm { train: false, .. } => OpKind::BatchNormEval,
            Op::Linear => OpKind::Linear,
            Op::Add => OpKind::Add,
            Op::ScaleChannels => OpKind::ScaleChannels,
            Op::ConcatChannels { .. } => OpKind::ConcatChannels,
            Op::Reshape => OpKind::Reshape,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
            Op::Sum => OpKind::Sum,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
        }
    }
}

struct Node<T> {
    op: Op<T>,
    inputs: Vec<Var>,
    value: Tensor<T>,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm, for updating the
/// running estimates.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<Var>, value: Tensor<T>) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with(op, inputs, value, requires_grad)
    }

    fn push_with(&mut self, op: Op<T>, inputs: Vec<Var>, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf (parameter or checked input).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_with(Op::Leaf, Vec::new(), value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_with(Op::Leaf, Vec::new(), value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(weight), bias.map(|b| self.value(b)), stride, padding)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.push(Op::Conv2d { stride, padding }, inputs, y))
    }

    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let (y, argmax) = ops::maxpool2d(self.value(x), k, stride, padding)?;
        Ok(self.push(Op::MaxPool2d { argmax }, vec![x], y))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let y = ops::global_avg_pool(self.value(x))?;
        Ok(self.push(Op::GlobalAvgPool, vec![x], y))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(Op::Relu, vec![x], y)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        self.push(Op::Sigmoid, vec![x], y)
    }

    /// Batch norm normalizing by the batch's own statistics.
    pub fn batchnorm_train(&mut self, x: Var, scale: Var, shift: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let bn = ops::batchnorm2d_train(self.value(x), self.value(scale), self.value(shift), eps)?;
        let stats = BatchStats {
            mean: bn.mean,
            var: bn.var,
            count: bn.count,
        };
        let op = Op::BatchNorm {
            normalized: bn.normalized,
            inv_std: bn.inv_std,
            train: true,
        };
        Ok((self.push(op, vec![x, scale, shift], bn.output), stats))
    }

    /// Batch norm using fixed statistics (inference).
    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        scale: Var,
        shift: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<Var> {
        let (y, normalized, inv_std) = ops::batchnorm2d_eval(
            self.value(x),
            self.value(scale),
            self.value(shift),
            running_mean,
            running_var,
            eps,
        )?;
        let op = Op::BatchNorm {
            normalized,
            inv_std,
            train: false,
        };
        Ok(self.push(op, vec![x, scale, shift], y))
    }

    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(weight), self.value(bias))?;
        Ok(self.push(Op::Linear, vec![x, weight, bias], y))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add, vec![a, b], y))
    }

    /// Multiplies channel `c` of sample `n` in `u` by `s[n, c]`.
    pub fn scale_channels(&mut self, u: Var, s: Var) -> Result<Var> {
        let y = ops::scale_channels(self.value(u), self.value(s))?;
        Ok(self.push(Op::ScaleChannels, vec![u, s], y))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ops::concat_channels(&tensors)?;
        let widths = tensors.iter().map(|t| t.shape()[1]).collect();
        Ok(self.push(Op::ConcatChannels { widths }, parts.to_vec(), y))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![x], y))
    }

    /// Mean cross-entropy of `[N, K]` logits against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_cross_entropy(self.value(logits), labels)?;
        let op = Op::SoftmaxCrossEntropy {
            probs,
            labels: labels.to_vec(),
        };
        Ok(self.push(op, vec![logits], Tensor::scalar(loss)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(s))
    }

    /// `sum(x * weights)` for a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(Error::shape(format!(
                "weighted_sum: {:?} vs {:?}",
                xv.shape(),
                weights.shape()
            )));
        }
        let s = xv.data().iter().zip(weights.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Op::WeightedSum { weights }, vec![x], Tensor::scalar(s)))
    }

    /// Hash of every non-smooth decision taken in the forward pass: the sign
    /// pattern at each ReLU input and the argmax of each max-pool window.
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu => {
                    for &v in self.nodes[node.inputs[0].0].value.data() {
                        (v > T::zero()).hash(&mut h);
                    }
                }
                Op::MaxPool2d { argmax } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate additively
    /// where a value fans out to several consumers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for g in &mut self.grads {
            *g = None;
        }
        self.grads[loss.0] = Some(Tensor::scalar(T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let (lower, upper) = self.grads.split_at_mut(i);
            let Some(gout) = upper[0].as_ref() else {
                continue;
            };
            let input_grads = backward_node(&self.nodes, node, gout)?;
            for (&inp, g) in node.inputs.iter().zip(input_grads) {
                if let Some(g) = g {
                    if !self.nodes[inp.0].requires_grad {
                        continue;
                    }
                    match &mut lower[inp.0] {
                        Some(acc) => acc.add_assign(&g)?,
                        slot @ None => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

fn backward_node<T: Scalar>(nodes: &[Node<T>], node: &Node<T>, gout: &Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> {
    let val = |k: usize| &nodes[node.inputs[k].0].value;
    let needs = |k: usize| nodes[node.inputs[k].0].requires_grad;
    Ok(match &node.op {
        Op::Leaf => Vec::new(),
        Op::Conv2d { stride, padding } => {
            let g = ops::conv2d_backward(val(0), val(1), gout, *stride, *padding, needs(0))?;
            let mut grads = vec![g.input, Some(g.weight)];
            if node.inputs.len() == 3 {
                grads.push(Some(g.bias));
            }
            grads
        }
        Op::MaxPool2d { argmax } => vec![Some(ops::maxpool2d_backward(val(0).shape(), argmax, gout)?)],
        Op::GlobalAvgPool => vec![Some(ops::global_avg_pool_backward(val(0).shape(), gout)?)],
        Op::Relu => vec![Some(ops::relu_backward(val(0), gout))],
        Op::Sigmoid => vec![Some(ops::sigmoid_backward(&node.value, gout))],
        Op::BatchNorm {
            normalized,
            inv_std,
            train,
        } => {
            let (dx, dscale, dshift) = if *train {
                ops::batchnorm2d_train_backward(normalized, inv_std, val(1), gout)?
            } else {
                ops::batchnorm2d_eval_backward(normalized, inv_std, val(1), gout)?
            };
            vec![Some(dx), Some(dscale), Some(dshift)]
        }
        Op::Linear => {
            let (dx, dw, db) = ops::linear_backward(val(0), val(1), gout)?;
            vec![Some(dx), Some(dw), Some(db)]
        }
        Op::Add => vec![Some(gout.clone()), Some(gout.clone())],
        Op::ScaleChannels => {
            let (du, ds) = ops::scale_channels_backward(val(0), val(1), gout)?;
            vec![Some(du), Some(ds)]
        }
        Op::ConcatChannels { widths } => ops::concat_channels_backward(widths, gout)?
            .into_iter()
            .map(Some)
            .collect(),
        Op::Reshape => vec![Some(gout.reshape(val(0).shape())?)],
        Op::SoftmaxCrossEntropy { probs, labels } => {
            vec![Some(ops::softmax_cross_entropy_backward(probs, labels, gout.item()?)?)]
        }
        Op::Sum => {
            let g = gout.item()?;
            vec![Some(Tensor::full(val(0).shape(), g)?)]
        }
        Op::WeightedSum { weights } => {
            let g = gout.item()?;
            vec![Some(weights.map(|w| w * g))]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(&[2, 3], |i| i as f64).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut g = Graph::<f32>::new();
        let x = g.param(Tensor::ones(&[2]).unwrap());
        let y = g.relu(x);
        assert!(matches!(g.backward(y), Err(Error::Argument(_))));
    }

    #[test]
    fn residual_add_passes_gradient_to_both_branches() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn(&[1, 1, 2, 2], |i| i as f64 + 1.0).unwrap());
        let f = g.relu(x);
        let h = g.add(f, x).unwrap();
        let w = Tensor::new(&[1, 1, 2, 2], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let loss = g.weighted_sum(h, w.clone()).unwrap();
        g.backward(loss).unwrap();
        // both branches carry the upstream gradient unchanged: relu' = 1 here
        assert_eq!(g.grad(f).unwrap(), &w);
        let gx: Vec<f64> = w.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(g.grad(x).unwrap().data(), gx.as_slice());
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let logits = Tensor::new(&[2, 3], vec![0.2, -1.0, 0.7, 1.5, 0.0, -0.3]).unwrap();
        let labels = [2, 0];
        let mut g = Graph::<f64>::new();
        let x = g.param(logits.clone());
        let loss = g.softmax_cross_entropy(x, &labels).unwrap();
        g.backward(loss).unwrap();
        let p = ops::softmax(&logits).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                let onehot = if labels[r] == c { 1.0 } else { 0.0 };
                let expect = (p.data()[r * 3 + c] - onehot) / 2.0;
                assert!((g.grad(x).unwrap().data()[r * 3 + c] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::<f32>::new();
        let c = g.constant(Tensor::ones(&[3]).unwrap());
        let p = g.param(Tensor::ones(&[3]).unwrap());
        let y = g.add(c, p).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert!(g.grad(p).is_some());
        assert_eq!(g.op_kind(y), OpKind::Add);
        assert_eq!(g.inputs(y), &[c, p]);
    }
}
