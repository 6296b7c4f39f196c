use super::tensor::{Scalar, Tensor};
use super::EngineError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Relu(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        /// Patch matrices of every image, kept when the weight needs a gradient.
        cols: Option<Vec<T>>,
    },
    BatchNorm {
        input: Var,
        scale: Var,
        bias: Var,
        /// Normalized input, kept for the backward pass.
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    GlobalAvgPool(Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Option<Var>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        probs: Tensor<T>,
        labels: Vec<usize>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Relu(a) | Op::GlobalAvgPool(a) => vec![*a],
            Op::Conv2d { input, weight, bias, .. } | Op::Linear { input, weight, bias } => {
                let mut v = vec![*input, *weight];
                v.extend(bias.iter().copied());
                v
            }
            Op::BatchNorm { input, scale, bias, .. } => vec![*input, *scale, *bias],
            Op::SoftmaxCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// A dynamically recorded computation graph.
#[derive(Debug)]
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v` was
    /// reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Accumulates d(loss)/d(node) into every reachable node that requires a
    /// gradient. Gradients from a previous call are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<(), EngineError> {
        let shape = self.nodes[loss.0].value.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(EngineError::NonScalarLoss(shape.to_vec()));
        }
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if node.op.inputs().iter().any(|v| v.0 >= i) {
                return Err(EngineError::Cycle(i));
            }
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape()));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(upstream) = self.grads[i].clone() else { continue };
            let contributions = self.vjp(i, &upstream)?;
            for (var, g) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut self.grads[var.0] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each of its inputs that needs
    /// one.
    fn vjp(&self, i: usize, upstream: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>, EngineError> {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if needs(v) {
                        out.push((v, upstream.clone()));
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    out.push((*a, upstream.zip_map(vb, |g, y| g * y)?));
                }
                if needs(*b) {
                    out.push((*b, upstream.zip_map(va, |g, x| g * x)?));
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                out.push((*a, upstream.map(|g| g * c)));
            }
            Op::Sum(a) => {
                let g = upstream.item();
                out.push((*a, Tensor::full(self.value(*a).shape(), g)));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                out.push((*a, upstream.zip_map(x, |g, x| if x > T::zero() { g } else { T::zero() })?));
            }
            Op::GlobalAvgPool(a) => out.push((*a, super::ops::global_avg_pool_backward(self.value(*a), upstream))),
            Op::Conv2d { input, weight, bias, stride, pad, cols } => {
                let grads = super::conv::conv2d_backward(
                    self.value(*input),
                    self.value(*weight),
                    upstream,
                    *stride,
                    *pad,
                    cols.as_deref(),
                    needs(*input),
                    needs(*weight),
                    bias.is_some_and(needs),
                );
                if let Some(g) = grads.input {
                    out.push((*input, g));
                }
                if let Some(g) = grads.weight {
                    out.push((*weight, g));
                }
                if let (Some(b), Some(g)) = (bias, grads.bias) {
                    out.push((*b, g));
                }
            }
            Op::BatchNorm { input, scale, bias, xhat, inv_std, batch_stats } => {
                let grads = super::norm::batch_norm_backward(
                    xhat,
                    inv_std,
                    self.value(*scale),
                    upstream,
                    *batch_stats,
                );
                if needs(*input) {
                    out.push((*input, grads.input));
                }
                if needs(*scale) {
                    out.push((*scale, grads.scale));
                }
                if needs(*bias) {
                    out.push((*bias, grads.bias));
                }
            }
            Op::Linear { input, weight, bias } => {
                let (gi, gw, gb) = super::ops::linear_backward(
                    self.value(*input),
                    self.value(*weight),
                    upstream,
                );
                if needs(*input) {
                    out.push((*input, gi));
                }
                if needs(*weight) {
                    out.push((*weight, gw));
                }
                if let Some(b) = bias {
                    if needs(*b) {
                        out.push((*b, gb));
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, probs, labels } => {
                let n = labels.len();
                let k = probs.shape()[1];
                let scale = upstream.item() / T::cast_f64(n as f64);
                let mut g = probs.clone();
                let gd = g.data_mut();
                for (row, &label) in labels.iter().enumerate() {
                    gd[row * k + label] = gd[row * k + label] - T::one();
                }
                for v in gd.iter_mut() {
                    *v = *v * scale;
                }
                out.push((*logits, g));
            }
        }
        Ok(out)
    }
}
