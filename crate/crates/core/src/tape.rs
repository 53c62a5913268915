//! Reverse-mode automatic differentiation on a Wengert list.
//!
//! A [`Tape`] owns an append-only list of nodes. Every node stores the
//! operation that produced it, the indices of its inputs (always earlier in
//! the list, so the list is its own topological order), and the forward
//! value. [`Tape::backward`] seeds the loss gradient with one and walks the
//! list in reverse, accumulating gradients into every node that can reach a
//! trainable parameter. Paths cut by [`Tape::stop_gradient`] contribute
//! exactly zero.
//!
//! Nodes are addressed by [`NodeRef`], a plain index. Values are immutable
//! once recorded; a fresh tape is built for every training step.

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeRef(usize);

enum Op<S> {
    /// Leaf that never receives gradient (inputs, constants).
    Input,
    /// Trainable leaf; its parameter id lives in `Tape::params`.
    Param,
    Conv2d { x: NodeRef, w: NodeRef, stride: usize, pad: usize },
    DepthwiseConv2d { x: NodeRef, w: NodeRef, stride: usize, pad: usize },
    Linear { x: NodeRef, w: NodeRef, b: NodeRef },
    BatchNorm { x: NodeRef, gamma: NodeRef, beta: NodeRef, mean: Vec<S>, var: Vec<S>, eps: S },
    Relu { x: NodeRef },
    HSwish { x: NodeRef },
    Sigmoid { x: NodeRef },
    GlobalAvgPool { x: NodeRef },
    Add { a: NodeRef, b: NodeRef },
    Mul { a: NodeRef, b: NodeRef },
    L2Normalize { x: NodeRef, axis: usize },
    /// Identity whose input edge is deliberately not recorded: gradient
    /// must never flow past it.
    StopGradient,
    Sum { x: NodeRef },
    Scale { x: NodeRef, k: S },
}

struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    requires_grad: bool,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    params: Vec<(usize, NodeRef)>,
}

/// Per-parameter gradients collected by [`Tape::backward`]. Every parameter
/// registered on the tape is present, with a zero tensor when no gradient
/// reached it.
#[derive(Debug)]
pub struct Gradients<S> {
    by_id: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, param_id: usize) -> Option<&Tensor<S>> {
        self.by_id.get(param_id).and_then(|g| g.as_ref())
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, n: NodeRef) -> &Tensor<S> {
        &self.nodes[n.0].value
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>, requires_grad: bool) -> NodeRef {
        self.nodes.push(Node { op, value, requires_grad });
        NodeRef(self.nodes.len() - 1)
    }

    fn needs_grad(&self, n: NodeRef) -> bool {
        self.nodes[n.0].requires_grad
    }

    /// Records a non-trainable leaf (network input or constant).
    pub fn input(&mut self, value: Tensor<S>) -> NodeRef {
        self.push(Op::Input, value, false)
    }

    /// Records a trainable leaf. `param_id` keys the gradient lookup after
    /// backward; ids must be unique within one tape.
    pub fn param(&mut self, value: Tensor<S>, param_id: usize) -> NodeRef {
        let node = self.push(Op::Param, value, true);
        self.params.push((param_id, node));
        node
    }

    pub fn conv2d(&mut self, x: NodeRef, w: NodeRef, stride: usize, pad: usize) -> Result<NodeRef> {
        let value = ops::conv2d(self.value(x), self.value(w), stride, pad)?;
        let rg = self.needs_grad(x) || self.needs_grad(w);
        Ok(self.push(Op::Conv2d { x, w, stride, pad }, value, rg))
    }

    pub fn depthwise_conv2d(&mut self, x: NodeRef, w: NodeRef, stride: usize, pad: usize) -> Result<NodeRef> {
        let value = ops::depthwise_conv2d(self.value(x), self.value(w), stride, pad)?;
        let rg = self.needs_grad(x) || self.needs_grad(w);
        Ok(self.push(Op::DepthwiseConv2d { x, w, stride, pad }, value, rg))
    }

    pub fn linear(&mut self, x: NodeRef, w: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let value = ops::linear(self.value(x), self.value(w), self.value(b))?;
        let rg = self.needs_grad(x) || self.needs_grad(w) || self.needs_grad(b);
        Ok(self.push(Op::Linear { x, w, b }, value, rg))
    }

    /// Train-mode batch normalization. Returns the node plus the batch
    /// statistics so the caller can fold them into its running averages.
    pub fn batchnorm2d_train(
        &mut self,
        x: NodeRef,
        gamma: NodeRef,
        beta: NodeRef,
        eps: S,
    ) -> Result<(NodeRef, Vec<S>, Vec<S>)> {
        let out = ops::batchnorm2d_train(self.value(x), self.value(gamma), self.value(beta), eps)?;
        let (mean, var) = (out.mean.clone(), out.var.clone());
        let rg = self.needs_grad(x) || self.needs_grad(gamma) || self.needs_grad(beta);
        let node = self.push(
            Op::BatchNorm { x, gamma, beta, mean: out.mean, var: out.var, eps },
            out.y,
            rg,
        );
        Ok((node, mean, var))
    }

    pub fn relu(&mut self, x: NodeRef) -> Result<NodeRef> {
        let value = ops::relu(self.value(x))?;
        let rg = self.needs_grad(x);
        Ok(self.push(Op::Relu { x }, value, rg))
    }

    pub fn hswish(&mut self, x: NodeRef) -> Result<NodeRef> {
        let value = ops::hswish(self.value(x))?;
        let rg = self.needs_grad(x);
        Ok(self.push(Op::HSwish { x }, value, rg))
    }

    pub fn sigmoid(&mut self, x: NodeRef) -> Result<NodeRef> {
        let value = ops::sigmoid(self.value(x))?;
        let rg = self.needs_grad(x);
        Ok(self.push(Op::Sigmoid { x }, value, rg))
    }

    pub fn global_avg_pool(&mut self, x: NodeRef) -> Result<NodeRef> {
        let value = ops::global_avg_pool(self.value(x))?;
        let rg = self.needs_grad(x);
        Ok(self.push(Op::GlobalAvgPool { x }, value, rg))
    }

    pub fn add(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let value = ops::add(self.value(a), self.value(b))?;
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Op::Add { a, b }, value, rg))
    }

    pub fn mul(&mut self, a: NodeRef, b: NodeRef) -> Result<NodeRef> {
        let value = ops::mul(self.value(a), self.value(b))?;
        let rg = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Op::Mul { a, b }, value, rg))
    }

    pub fn l2_normalize(&mut self, x: NodeRef, axis: usize) -> Result<NodeRef> {
        let value = ops::l2_normalize(self.value(x), axis)?;
        let rg = self.needs_grad(x);
        Ok(self.push(Op::L2Normalize { x, axis }, value, rg))
    }

    /// Identity forward; gradient does not flow past this node.
    pub fn stop_gradient(&mut self, x: NodeRef) -> NodeRef {
        let value = self.value(x).clone();
        self.push(Op::StopGradient, value, false)
    }

    pub fn sum(&mut self, x: NodeRef) -> Result<NodeRef> {
        let value = ops::sum_all(self.value(x))?;
        let rg = self.needs_grad(x);
        Ok(self.push(Op::Sum { x }, value, rg))
    }

    pub fn scale(&mut self, x: NodeRef, k: S) -> Result<NodeRef> {
        let value = ops::scale(self.value(x), k)?;
        let rg = self.needs_grad(x);
        Ok(self.push(Op::Scale { x, k }, value, rg))
    }

    /// Reverse pass from a scalar loss node. Returns a gradient for every
    /// registered parameter (zeros where no gradient path exists).
    pub fn backward(&self, loss: NodeRef) -> Result<Gradients<S>> {
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }

        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(S::one()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad && !matches!(self.nodes[i].op, Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input | Op::Param | Op::StopGradient => {
                    // Leaves keep their gradient; stop_gradient is handled
                    // by never propagating to its input.
                    if let Op::Param = self.nodes[i].op {
                        grads[i] = Some(g);
                    }
                }
                Op::Conv2d { x, w, stride, pad } => {
                    let (dx, dw) =
                        ops::conv2d_backward(self.value(*x), self.value(*w), *stride, *pad, &g)?;
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *w, dw);
                }
                Op::DepthwiseConv2d { x, w, stride, pad } => {
                    let (dx, dw) = ops::depthwise_conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        *stride,
                        *pad,
                        &g,
                    )?;
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *w, dw);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = ops::linear_backward(self.value(*x), self.value(*w), &g)?;
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *w, dw);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::BatchNorm { x, gamma, beta, mean, var, eps } => {
                    let (dx, dgamma, dbeta) = ops::batchnorm2d_train_backward(
                        self.value(*x),
                        self.value(*gamma),
                        mean,
                        var,
                        *eps,
                        &g,
                    )?;
                    self.accumulate(&mut grads, *x, dx);
                    self.accumulate(&mut grads, *gamma, dgamma);
                    self.accumulate(&mut grads, *beta, dbeta);
                }
                Op::Relu { x } => {
                    let dx = ops::relu_backward(self.value(*x), &g);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::HSwish { x } => {
                    let dx = ops::hswish_backward(self.value(*x), &g);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid { x } => {
                    // Sigmoid backward uses the saved output value.
                    let dx = ops::sigmoid_backward(&self.nodes[i].value, &g);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::GlobalAvgPool { x } => {
                    let dx = ops::global_avg_pool_backward(self.value(*x).shape(), &g);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g);
                }
                Op::Mul { a, b } => {
                    let (da, db) = ops::mul_backward(self.value(*a), self.value(*b), &g);
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::L2Normalize { x, axis } => {
                    let dx = ops::l2_normalize_backward(self.value(*x), *axis, &g);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Sum { x } => {
                    let gv = g.scalar_value()?;
                    let dx = Tensor::full(self.value(*x).shape(), gv);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Scale { x, k } => {
                    let dx = ops::scale(&g, *k)?;
                    self.accumulate(&mut grads, *x, dx);
                }
            }
        }

        let max_id = self.params.iter().map(|(id, _)| *id).max().map_or(0, |m| m + 1);
        let mut by_id: Vec<Option<Tensor<S>>> = (0..max_id).map(|_| None).collect();
        for (id, node) in &self.params {
            let g = grads[node.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(self.value(*node).shape()));
            g.check_finite(&format!("backward: gradient of parameter {id}"))?;
            if by_id[*id].is_some() {
                return Err(Error::contract(format!(
                    "backward: parameter id {id} registered twice on one tape"
                )));
            }
            by_id[*id] = Some(g);
        }
        Ok(Gradients { by_id })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], target: NodeRef, g: Tensor<S>) {
        // Gradient flowing into a node that cannot reach any parameter is
        // discarded; stop_gradient nodes fall out here as well.
        if !self.nodes[target.0].requires_grad && !matches!(self.nodes[target.0].op, Op::Param) {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_has_gradient_two_x() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![2], vec![1.0f64, 2.0], "x").unwrap(), 0);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        assert_eq!(tape.value(loss).scalar_value().unwrap(), 5.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn aligned_normalized_vectors_have_vanishing_gradient() {
        // loss = -dot(l2_normalize(s), stop_gradient(t)) with s == t: the
        // cosine is at its maximum, so the gradient is zero up to float
        // round-off.
        let v = Tensor::from_vec(vec![3], vec![0.3f64, -1.2, 0.7], "v").unwrap();
        let mut tape = Tape::new();
        let s = tape.param(v.clone(), 0);
        let t_raw = tape.input(v);
        let t_norm = tape.l2_normalize(t_raw, 0).unwrap();
        let t = tape.stop_gradient(t_norm);
        let s_norm = tape.l2_normalize(s, 0).unwrap();
        let prod = tape.mul(s_norm, t).unwrap();
        let dot = tape.sum(prod).unwrap();
        let loss = tape.scale(dot, -1.0).unwrap();
        // The norm guard (norm + 1e-12) keeps the self-cosine a hair under
        // one, so the bound sits just above that offset.
        assert!((tape.value(loss).scalar_value().unwrap() + 1.0).abs() < 1e-10);
        let grads = tape.backward(loss).unwrap();
        for &g in grads.get(0).unwrap().data() {
            assert!(g.abs() < 1e-10, "gradient component {g} should vanish");
        }
    }

    #[test]
    fn stop_gradient_blocks_the_path_exactly() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![2], vec![1.0f64, -2.0], "x").unwrap(), 0);
        let blocked = tape.stop_gradient(x);
        let sq = tape.mul(blocked, blocked).unwrap();
        let loss = tape.sum(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn gradients_accumulate_over_shared_inputs() {
        // loss = sum(x + x) -> grad = 2 per element.
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![2], vec![5.0f32, -1.0], "x").unwrap(), 0);
        let y = tape.add(x, x).unwrap();
        let loss = tape.sum(y).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(0).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_losses() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![2], vec![1.0f32, 2.0], "x").unwrap(), 0);
        let y = tape.add(x, x).unwrap();
        let err = tape.backward(y).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn replaying_the_same_graph_is_bitwise_deterministic() {
        let run = || -> (f64, Vec<f64>) {
            let mut tape = Tape::new();
            let x = tape
                .param(Tensor::from_vec(vec![4], vec![0.9f64, -0.3, 0.05, 2.0], "x").unwrap(), 0);
            let h = tape.hswish(x).unwrap();
            let n = tape.l2_normalize(h, 0).unwrap();
            let s = tape.sum(n).unwrap();
            let loss = tape.scale(s, -0.25).unwrap();
            let grads = tape.backward(loss).unwrap();
            (
                tape.value(loss).scalar_value().unwrap(),
                grads.get(0).unwrap().data().to_vec(),
            )
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(g1, g2);
    }

    #[test]
    fn unreached_parameters_get_zero_gradients_of_matching_shape() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::full(&[2, 3], 1.0f32), 0);
        let _unused = tape.param(Tensor::full(&[4], 2.0f32), 1);
        let loss = tape.sum(a).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(0).unwrap().shape(), &[2, 3]);
        let zero = grads.get(1).unwrap();
        assert_eq!(zero.shape(), &[4]);
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }
}
