//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node whose id is its position on
//! the tape. Ids grow in creation order, so the tape is already a
//! topological order; [`Graph::backward`] walks it once in reverse.

use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::kernels;
use crate::tensor::{Element, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Backward rule of a [`Graph::custom`] node: receives the input values, the
/// output value and the output gradient; returns one gradient per input.
pub type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Tensor<T>>>;

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    },
    Matmul {
        a: Var,
        b: Var,
    },
    Upsample {
        input: Var,
        scale: usize,
    },
    Concat {
        a: Var,
        b: Var,
    },
    Reshape {
        input: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Relu {
        input: Var,
    },
    Sigmoid {
        input: Var,
    },
    Scale {
        input: Var,
        factor: T,
    },
    Sum {
        input: Var,
    },
    Mean {
        input: Var,
    },
    Bce {
        logits: Var,
        masks: Tensor<T>,
    },
    Custom {
        name: &'static str,
        inputs: Vec<Var>,
        backward: CustomBackward<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Matmul { .. } => "matmul",
            Op::Upsample { .. } => "bilinear_upsample",
            Op::Concat { .. } => "concat_channels",
            Op::Reshape { .. } => "reshape",
            Op::Add { .. } => "add",
            Op::Relu { .. } => "relu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Scale { .. } => "scale_by",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Bce { .. } => "bce_loss",
            Op::Custom { name, .. } => name,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation. One graph is built per forward pass.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> fmt::Debug for Graph<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds a trainable leaf; gradients are collected for it.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Adds a constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// First node (in tape order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (Var(i), n.op.name()))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let value = kernels::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            stride,
            padding,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Matmul { a, b }, rg))
    }

    pub fn upsample_bilinear(&mut self, input: Var, scale: usize) -> Result<Var> {
        let value = kernels::upsample_bilinear(self.value(input), scale)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Upsample { input, scale }, rg))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::concat_channels(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).reshape(shape)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::add(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = kernels::relu(self.value(input));
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Relu { input }, rg)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let value = kernels::sigmoid(self.value(input));
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Sigmoid { input }, rg)
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Var {
        let value = kernels::scale(self.value(input), factor);
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Scale { input, factor }, rg)
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let value = Tensor::scalar(self.value(input).sum());
        let rg = self.any_grad(&[input]);
        self.push(value, Op::Sum { input }, rg)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let t = self.value(input);
        if t.numel() == 0 {
            return Err(Error::shape("mean", "empty input"));
        }
        let value = Tensor::scalar(t.sum() / T::from_usize(t.numel()).expect("count fits"));
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Mean { input }, rg))
    }

    /// Mean binary cross-entropy of `logits` against constant binary `masks`.
    pub fn bce_loss(&mut self, logits: Var, masks: Tensor<T>) -> Result<Var> {
        let loss = kernels::bce_with_logits(self.value(logits), &masks)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { logits, masks }, rg))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor<T>,
        backward: CustomBackward<T>,
    ) -> Var {
        let rg = self.any_grad(inputs);
        self.push(
            value,
            Op::Custom {
                name,
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    /// Reverse pass from a scalar `root`, seeded with gradient 1.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be a scalar, got {:?}", root_value.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(root_value.shape().to_vec()));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let contributions = self.vjp(node, &grad)?;
            grads[id] = Some(grad);
            for (parent, g) in contributions {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&g)?,
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, node: &Node<T>, grad: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let g = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    grad,
                    *stride,
                    *padding,
                    rg(*input),
                    rg(*weight),
                )?;
                if let Some(dx) = g.input {
                    out.push((*input, dx));
                }
                if let Some(dw) = g.weight {
                    out.push((*weight, dw));
                }
                if let Some(b) = bias {
                    out.push((*b, g.bias));
                }
            }
            Op::Matmul { a, b } => {
                let (da, db) =
                    kernels::matmul_backward(self.value(*a), self.value(*b), grad, rg(*a), rg(*b))?;
                out.extend(da.map(|d| (*a, d)));
                out.extend(db.map(|d| (*b, d)));
            }
            Op::Upsample { input, scale } => {
                let dx = kernels::upsample_bilinear_backward(
                    self.value(*input).shape(),
                    grad,
                    *scale,
                )?;
                out.push((*input, dx));
            }
            Op::Concat { a, b } => {
                let c1 = self.value(*a).shape()[1];
                let (ga, gb) = kernels::split_channels(grad, c1)?;
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Reshape { input } => {
                out.push((*input, grad.reshape(self.value(*input).shape())?));
            }
            Op::Add { a, b } => {
                out.push((*a, grad.clone()));
                out.push((*b, grad.clone()));
            }
            Op::Relu { input } => {
                out.push((*input, kernels::relu_backward(self.value(*input), grad)));
            }
            Op::Sigmoid { input } => {
                out.push((*input, kernels::sigmoid_backward(&node.value, grad)));
            }
            Op::Scale { input, factor } => {
                out.push((*input, kernels::scale(grad, *factor)));
            }
            Op::Sum { input } => {
                let shape = self.value(*input).shape().to_vec();
                out.push((*input, Tensor::full(shape, grad.data()[0])));
            }
            Op::Mean { input } => {
                let t = self.value(*input);
                let g = grad.data()[0] / T::from_usize(t.numel()).expect("count fits");
                out.push((*input, Tensor::full(t.shape().to_vec(), g)));
            }
            Op::Bce { logits, masks } => {
                let g = kernels::bce_with_logits_backward(self.value(*logits), masks);
                out.push((*logits, kernels::scale(&g, grad.data()[0])));
            }
            Op::Custom {
                name,
                inputs,
                backward,
            } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = backward(&values, &node.value, grad);
                if gs.len() != inputs.len() {
                    return Err(Error::shape(
                        name,
                        format!("backward returned {} gradients for {} inputs", gs.len(), inputs.len()),
                    ));
                }
                for (v, g) in inputs.iter().zip(gs) {
                    if g.shape() != self.value(*v).shape() {
                        return Err(Error::shape(
                            name,
                            format!("gradient {:?} for input {:?}", g.shape(), self.value(*v).shape()),
                        ));
                    }
                    out.push((*v, g));
                }
            }
        }
        Ok(out)
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the root with respect to `v`; `None` when no path exists
    /// or `v` does not require gradients.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_chain_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64([3], &[1.0, -2.0, 0.5]).unwrap());
        let y = g.scale(x, 3.0);
        let s = g.sum(y);
        assert_eq!(g.value(s).data(), &[-1.5]);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0, 3.0, 3.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64([2], &[1.0, 2.0]).unwrap());
        let y = g.add(x, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::ones([2]));
        let x = g.param(Tensor::ones([2]));
        let y = g.add(c, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::ones([2]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn grad_shapes_match_values() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_fn([1, 2, 5, 5], |i| (i as f64).sin()));
        let w = g.param(Tensor::from_fn([3, 2, 3, 3], |i| (i as f64 * 0.1).cos()));
        let b = g.param(Tensor::zeros([3]));
        let y = g.conv2d(x, w, Some(b), 2, 1).unwrap();
        let r = g.relu(y);
        let s = g.mean(r).unwrap();
        let grads = g.backward(s).unwrap();
        for v in [x, w, b, y, r] {
            assert_eq!(grads.get(v).unwrap().shape(), g.value(v).shape());
        }
    }

    #[test]
    fn non_finite_is_located() {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64([1], &[f64::MAX]).unwrap());
        let y = g.scale(x, 10.0);
        assert_eq!(g.first_non_finite(), Some((y, "scale_by")));
    }
}
