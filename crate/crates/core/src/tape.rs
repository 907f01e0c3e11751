//! Append-only operation tape and reverse-mode gradient propagation.

use std::collections::HashMap;

use crate::error::{CoreError, Result};
use crate::kernels::{self, BatchStats, CrossEntropySaved, NormSaved};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Conv2d,
    BilinearResize,
    BatchNorm,
    Relu,
    Add,
    Mul,
    Scale,
    Sum,
    ConcatChannels,
    CrossEntropy,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Resize {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: NormSaved<T>,
    },
    Relu {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<u32>,
        ignore_index: u32,
        saved: CrossEntropySaved<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Resize { .. } => OpKind::BilinearResize,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Relu { .. } => OpKind::Relu,
            Op::Add { .. } => OpKind::Add,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::Sum { .. } => OpKind::Sum,
            Op::Concat { .. } => OpKind::ConcatChannels,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input, weight, bias, ..
            } => {
                let mut p = vec![*input, *weight];
                p.extend(bias);
                p
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![*input, *gamma, *beta],
            Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Resize { input }
            | Op::Relu { input }
            | Op::Scale { input, .. }
            | Op::Sum { input } => vec![*input],
            Op::Concat { parts } => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
}

/// Records one forward pass for a single backward pass.
///
/// Nodes are appended in execution order, so every parent precedes its
/// children and reverse insertion order is a valid topological order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    leaves: HashMap<Var, Tensor<T>>,
    params: HashMap<String, Var>,
    visited: usize,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf that required grad.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&var)
    }

    /// Gradient of a named parameter; `None` if it was not trainable on this tape.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).and_then(|v| self.leaves.get(v))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params
            .iter()
            .filter(|(_, v)| self.leaves.contains_key(v))
            .map(|(k, _)| k.as_str())
    }

    /// Number of nodes backward walked (those reachable from the loss).
    pub fn visited(&self) -> usize {
        self.visited
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    pub fn parents(&self, var: Var) -> Vec<Var> {
        self.nodes[var.0].op.parents()
    }

    /// Bytes held by recorded values other than parameter leaves.
    pub fn activation_bytes(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| n.param.is_none())
            .map(|n| n.value.len() * std::mem::size_of::<T>())
            .sum()
    }

    fn check_var(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(CoreError::UnknownVar(v.0))
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.consumed {
            return Err(CoreError::BackwardTwice);
        }
        let parents = op.parents();
        for &p in &parents {
            self.check_var(p)?;
        }
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a named parameter once per tape; later calls return the same leaf.
    pub fn param(&mut self, name: &str, value: &Tensor<T>, trainable: bool) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let v = self.leaf(value.clone(), trainable);
        self.nodes[v.0].param = Some(name.to_string());
        self.params.insert(name.to_string(), v);
        v
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        self.check_var(input)?;
        self.check_var(weight)?;
        if let Some(b) = bias {
            self.check_var(b)?;
        }
        let out = kernels::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        out.ensure_finite("conv2d")?;
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
        )
    }

    pub fn bilinear_resize(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        self.check_var(input)?;
        let out = kernels::bilinear_resize(self.value(input), out_h, out_w)?;
        self.push(out, Op::Resize { input })
    }

    pub fn batch_norm_train(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, BatchStats<T>)> {
        for v in [input, gamma, beta] {
            self.check_var(v)?;
        }
        let (out, saved, stats) =
            kernels::batch_norm_train(self.value(input), self.value(gamma), self.value(beta), eps)?;
        out.ensure_finite("batch_norm")?;
        let v = self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            },
        )?;
        Ok((v, stats))
    }

    pub fn batch_norm_eval(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: T,
    ) -> Result<Var> {
        for v in [input, gamma, beta] {
            self.check_var(v)?;
        }
        let (out, saved) = kernels::batch_norm_eval(
            self.value(input),
            self.value(gamma),
            self.value(beta),
            running_mean,
            running_var,
            eps,
        )?;
        out.ensure_finite("batch_norm")?;
        self.push(
            out,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            },
        )
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        self.check_var(input)?;
        let out = kernels::relu(self.value(input));
        self.push(out, Op::Relu { input })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let out = kernels::add(self.value(a), self.value(b))?;
        self.push(out, Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let out = kernels::mul(self.value(a), self.value(b))?;
        self.push(out, Op::Mul { a, b })
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        self.check_var(input)?;
        let out = self.value(input).map(|v| v * factor);
        out.ensure_finite("scale")?;
        self.push(out, Op::Scale { input, factor })
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        self.check_var(input)?;
        let out = Tensor::scalar(self.value(input).sum());
        out.ensure_finite("sum")?;
        self.push(out, Op::Sum { input })
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            self.check_var(p)?;
        }
        let values: Vec<Tensor<T>> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let out = kernels::concat_channels(&values)?;
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn softmax_cross_entropy_mean(
        &mut self,
        logits: Var,
        labels: &[u32],
        ignore_index: u32,
    ) -> Result<Var> {
        self.check_var(logits)?;
        let (loss, saved) =
            kernels::softmax_cross_entropy_mean(self.value(logits), labels, ignore_index)?;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                ignore_index,
                saved,
            },
        )
    }

    /// Propagates d(loss)/d(node) from a scalar `loss` back to every leaf
    /// that requires grad. A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(CoreError::BackwardTwice);
        }
        self.check_var(loss)?;
        if self.value(loss).len() != 1 {
            return Err(CoreError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;

        let mut reachable = vec![false; loss.0 + 1];
        reachable[loss.0] = true;
        for i in (0..=loss.0).rev() {
            if reachable[i] {
                for p in self.nodes[i].op.parents() {
                    reachable[p.0] = true;
                }
            }
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one())?);
        let mut leaves = HashMap::new();
        let mut visited = 0;
        for i in (0..=loss.0).rev() {
            if !reachable[i] {
                continue;
            }
            visited += 1;
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let grad = match grads[i].take() {
                Some(g) => g,
                None => Tensor::zeros(node.value.shape())?,
            };
            if let Op::Leaf = node.op {
                leaves.insert(Var(i), grad);
                continue;
            }
            for (parent, g) in self.local_grads(i, &grad)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                let slot = &mut grads[parent.0];
                *slot = Some(match slot.take() {
                    None => g,
                    Some(mut acc) => {
                        acc.data_mut()
                            .iter_mut()
                            .zip(g.data())
                            .for_each(|(a, &b)| *a += b);
                        acc
                    }
                });
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && !leaves.contains_key(&Var(i)) {
                leaves.insert(Var(i), Tensor::zeros(node.value.shape())?);
            }
        }
        Ok(Gradients {
            leaves,
            params: self.params.clone(),
            visited,
        })
    }

    fn local_grads(&self, i: usize, grad: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[i];
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (gi, gw, gb) = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    bias.is_some(),
                    *stride,
                    *padding,
                    grad,
                )?;
                let mut out = vec![(*input, gi), (*weight, gw)];
                if let (Some(b), Some(gb)) = (bias, gb) {
                    out.push((*b, gb));
                }
                out
            }
            Op::Resize { input } => vec![(
                *input,
                kernels::bilinear_resize_backward(self.value(*input).shape(), grad)?,
            )],
            Op::BatchNorm {
                input,
                gamma,
                beta,
                saved,
            } => {
                let (gi, gg, gb) =
                    kernels::batch_norm_backward(self.value(*input), self.value(*gamma), saved, grad)?;
                vec![(*input, gi), (*gamma, gg), (*beta, gb)]
            }
            Op::Relu { input } => vec![(*input, kernels::relu_backward(&node.value, grad)?)],
            Op::Add { a, b } => vec![(*a, grad.clone()), (*b, grad.clone())],
            Op::Mul { a, b } => vec![
                (*a, kernels::mul(grad, self.value(*b))?),
                (*b, kernels::mul(grad, self.value(*a))?),
            ],
            Op::Scale { input, factor } => vec![(*input, grad.map(|g| g * *factor))],
            Op::Sum { input } => {
                let g = grad.data()[0];
                vec![(*input, Tensor::full(self.value(*input).shape(), g)?)]
            }
            Op::Concat { parts } => {
                let channels: Vec<usize> = parts.iter().map(|p| self.value(*p).shape()[1]).collect();
                parts
                    .iter()
                    .copied()
                    .zip(kernels::split_channels(grad, &channels)?)
                    .collect()
            }
            Op::CrossEntropy {
                logits,
                labels,
                ignore_index,
                saved,
            } => vec![(
                *logits,
                kernels::softmax_cross_entropy_backward(
                    self.value(*logits).shape(),
                    labels,
                    *ignore_index,
                    saved,
                    grad.data()[0],
                )?,
            )],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64).unwrap(), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_square_norm_gradient_is_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::from_fn(&[5], |i| i as f64 - 2.5).unwrap(), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        let g = tape.backward(half).unwrap();
        assert_eq!(g.get(x).unwrap(), tape.value(x));
    }

    #[test]
    fn add_gradient_reaches_both_parents() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::full(&[1, 1, 2, 2], 1.0).unwrap(), true);
        let b = tape.leaf(Tensor::full(&[1, 1, 2, 2], 2.0).unwrap(), true);
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(g.get(b).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0).unwrap(), true);
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s).unwrap_err(), CoreError::BackwardTwice);
        assert_eq!(tape.relu(x).unwrap_err(), CoreError::BackwardTwice);
    }

    #[test]
    fn unreachable_and_frozen_leaves() {
        let mut tape = Tape::<f32>::new();
        let used = tape.param("used", &Tensor::full(&[2], 3.0).unwrap(), true);
        let unused = tape.param("unused", &Tensor::full(&[2], 1.0).unwrap(), true);
        let frozen = tape.param("frozen", &Tensor::full(&[2], 1.0).unwrap(), false);
        let p = tape.mul(used, frozen).unwrap();
        let s = tape.sum(p).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.param("used").unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.param("unused").unwrap().data(), &[0.0, 0.0]);
        assert!(g.param("frozen").is_none());
        let _ = unused;
        // used, frozen, mul, sum
        assert_eq!(g.visited(), 4);
    }

    #[test]
    fn relu_of_negatives_has_zero_gradient() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::new(&[3], vec![-1.0, -0.5, -3.0]).unwrap(), true);
        let r = tape.relu(x).unwrap();
        assert!(tape.value(r).data().iter().all(|&v| v == 0.0));
        let s = tape.sum(r).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::full(&[2], 1.0).unwrap(), true);
        assert!(matches!(tape.backward(x), Err(CoreError::NonScalarLoss(_))));
    }
}
