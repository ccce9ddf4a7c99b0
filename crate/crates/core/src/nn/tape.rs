//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every operation of one forward pass. Values are kept
//! on the tape, so intermediate results stay inspectable after the pass;
//! [`Tape::backward`] walks the records in reverse and accumulates
//! gradients for every node that depends on a trainable leaf.

use super::kernels;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation defined outside the tape's built-in set.
///
/// `backward` receives the input values, the forward output, the gradient of
/// the output, and which inputs need a gradient; it returns one entry per
/// input.
pub trait CustomOp: Send + Sync {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        out_grad: &Tensor,
        needs: &[bool],
    ) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvT2 { x: Var, w: Var, b: Option<Var> },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, means: Vec<f64>, rstds: Vec<f64> },
    Relu { x: Var },
    Concat { parts: Vec<Var> },
    Upsample { x: Var, factor: usize },
    Softmax { x: Var },
    Reshape { x: Var },
    AddConst { x: Var },
    Combine { terms: Vec<(Var, f64)> },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match grads[v.0].as_mut() {
        Some(acc) => acc.add_assign(&g),
        None => grads[v.0] = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = kernels::conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, needs)
    }

    pub fn conv_t2(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let out = kernels::conv_t2_forward(self.value(x), self.value(w), b.map(|b| self.value(b)));
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::ConvT2 { x, w, b }, needs)
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (out, means, rstds) =
            kernels::group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(out, Op::GroupNorm { x, gamma, beta, groups, means, rstds }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        let needs = self.needs(x);
        self.push(out, Op::Relu { x }, needs)
    }

    /// Concatenates `[N, C_i, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let total_c: usize = parts.iter().map(|&p| self.value(p).shape()[1]).sum();
        let mut out = Tensor::zeros(&[n, total_c, h, w]);
        let plane = h * w;
        for i in 0..n {
            let mut offset = i * total_c * plane;
            for &p in parts {
                let v = self.value(p);
                let (pn, pc, ph, pw) = v.dims4();
                assert_eq!((pn, ph, pw), (n, h, w), "concat operands disagree in shape");
                let src = &v.data()[i * pc * plane..(i + 1) * pc * plane];
                out.data_mut()[offset..offset + pc * plane].copy_from_slice(src);
                offset += pc * plane;
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::Concat { parts: parts.to_vec() }, needs)
    }

    pub fn upsample(&mut self, x: Var, factor: usize) -> Var {
        let out = kernels::upsample_forward(self.value(x), factor);
        let needs = self.needs(x);
        self.push(out, Op::Upsample { x, factor }, needs)
    }

    /// Softmax over the channel axis of `[N, C, H, W]`.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let out = kernels::softmax_channels(self.value(x));
        let needs = self.needs(x);
        self.push(out, Op::Softmax { x }, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshaped(shape);
        let needs = self.needs(x);
        self.push(out, Op::Reshape { x }, needs)
    }

    /// `x + c` for a constant tensor of the same shape.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Var {
        let mut out = self.value(x).clone();
        out.add_assign(c);
        let needs = self.needs(x);
        self.push(out, Op::AddConst { x }, needs)
    }

    /// Weighted sum of same-shaped tensors.
    pub fn combine(&mut self, terms: &[(Var, f64)]) -> Var {
        assert!(!terms.is_empty());
        let mut out = Tensor::zeros(self.value(terms[0].0).shape());
        for &(v, c) in terms {
            for (o, x) in out.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += c * x;
            }
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        self.push(out, Op::Combine { terms: terms.to_vec() }, needs)
    }

    /// Scalar `sum(x * w)` for a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, w: Tensor) -> Var {
        assert_eq!(self.value(x).shape(), w.shape(), "weighted_sum operands disagree in shape");
        let total = self.value(x).data().iter().zip(w.data()).map(|(a, b)| a * b).sum();
        struct Dot(Tensor);
        impl CustomOp for Dot {
            fn backward(&self, _i: &[&Tensor], _o: &Tensor, g: &Tensor, _n: &[bool]) -> Vec<Option<Tensor>> {
                let mut d = self.0.clone();
                d.scale(g.item());
                vec![Some(d)]
            }
        }
        self.custom(&[x], Tensor::scalar(total), Box::new(Dot(w)))
    }

    /// Records an externally computed output together with its backward rule.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, needs)
    }

    /// Back-propagates from a scalar output.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward() needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backward_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.value(x),
                    self.value(w),
                    g,
                    stride,
                    pad,
                    self.needs(x),
                );
                if let Some(dx) = dx {
                    accumulate(grads, x, dx);
                }
                if self.needs(w) {
                    accumulate(grads, w, dw);
                }
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    accumulate(grads, b, db);
                }
            }
            &Op::ConvT2 { x, w, b } => {
                let (dx, dw, db) =
                    kernels::conv_t2_backward(self.value(x), self.value(w), g, self.needs(x));
                if let Some(dx) = dx {
                    accumulate(grads, x, dx);
                }
                if self.needs(w) {
                    accumulate(grads, w, dw);
                }
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    accumulate(grads, b, db);
                }
            }
            Op::GroupNorm { x, gamma, beta, groups, means, rstds } => {
                let (dx, dgamma, dbeta) = kernels::group_norm_backward(
                    self.value(*x),
                    self.value(*gamma),
                    *groups,
                    means,
                    rstds,
                    g,
                    self.needs(*x),
                );
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if self.needs(*gamma) {
                    accumulate(grads, *gamma, dgamma);
                }
                if self.needs(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            &Op::Relu { x } => {
                let mut dx = g.clone();
                for (d, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    if *y <= 0.0 {
                        *d = 0.0;
                    }
                }
                accumulate(grads, x, dx);
            }
            Op::Concat { parts } => {
                let (n, total_c, h, w) = g.dims4();
                let plane = h * w;
                let mut offsets = Vec::with_capacity(parts.len());
                let mut acc = 0;
                for &p in parts {
                    offsets.push(acc);
                    acc += self.value(p).shape()[1];
                }
                for (&p, &c0) in parts.iter().zip(&offsets) {
                    if !self.needs(p) {
                        continue;
                    }
                    let pc = self.value(p).shape()[1];
                    let mut dp = Tensor::zeros(&[n, pc, h, w]);
                    for i in 0..n {
                        let src = &g.data()[(i * total_c + c0) * plane..(i * total_c + c0 + pc) * plane];
                        dp.data_mut()[i * pc * plane..(i + 1) * pc * plane].copy_from_slice(src);
                    }
                    accumulate(grads, p, dp);
                }
            }
            &Op::Upsample { x, factor } => {
                let dx = kernels::upsample_backward(g, self.value(x).shape(), factor);
                accumulate(grads, x, dx);
            }
            &Op::Softmax { x } => {
                let dx = kernels::softmax_channels_backward(&node.value, g);
                accumulate(grads, x, dx);
            }
            &Op::Reshape { x } => {
                let dx = g.clone().reshaped(self.value(x).shape());
                accumulate(grads, x, dx);
            }
            &Op::AddConst { x } => accumulate(grads, x, g.clone()),
            Op::Combine { terms } => {
                for &(v, c) in terms {
                    if self.needs(v) {
                        let mut d = g.clone();
                        d.scale(c);
                        accumulate(grads, v, d);
                    }
                }
            }
            Op::Custom { inputs, op } => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|&v| self.needs(v)).collect();
                let input_grads = op.backward(&values, &node.value, g, &needs);
                debug_assert_eq!(input_grads.len(), inputs.len());
                for ((&v, dg), need) in inputs.iter().zip(input_grads).zip(needs) {
                    if let (Some(dg), true) = (dg, need) {
                        accumulate(grads, v, dg);
                    }
                }
            }
        }
    }
}
