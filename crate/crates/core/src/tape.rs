//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its value and the identifiers of
//! its inputs, so node order is a topological order. `backward` walks the
//! nodes in exact reverse recording order and accumulates into the
//! persistent gradients of leaves that require them.

use crate::error::{Error, Result};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    AddConst(Var),
    MaskMul(Var, Tensor<S>),
    LeakyRelu(Var, S),
    Abs(Var),
    Charbonnier { x: Var, r: S, eta: S },
    Sum(Var),
    Reshape(Var),
    Channel(Var, usize),
    Concat(Vec<Var>),
    NeighborDiff { x: Var, axis: usize },
    Conv2d { x: Var, w: Var, stride: usize, padding: usize },
    ConvTranspose2d { x: Var, w: Var, stride: usize, padding: usize },
    AddBias(Var, Var),
    Bilinear { image: Var, cx: Var, cy: Var },
    AvgPool2(Var),
    Spike { v: Var, threshold: S },
}

impl<S> Op<S> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddConst(..) => "add_const",
            Op::MaskMul(..) => "mask_mul",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Abs(..) => "abs",
            Op::Charbonnier { .. } => "charbonnier",
            Op::Sum(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::Channel(..) => "channel",
            Op::Concat(..) => "concat",
            Op::NeighborDiff { .. } => "neighbor_diff",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::AddBias(..) => "add_bias",
            Op::Bilinear { .. } => "bilinear_sample",
            Op::AvgPool2(..) => "avg_pool2",
            Op::Spike { .. } => "spike",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    grad: Option<Tensor<S>>,
}

/// Recording of one forward computation.
#[derive(Clone, Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    strict: bool,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), strict: false }
    }

    /// In strict mode every op fails with [`Error::Numeric`] instead of
    /// producing NaN or infinity.
    pub fn with_strict(mut self, strict: bool) -> Self {
        self.strict = strict;
        self
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Names of recorded operations in recording order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if self.strict && !value.all_finite() {
            return Err(Error::Numeric(format!("{} produced non-finite values", op.name())));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: S) -> Result<Var> {
        let v = self.value(a).scale(k);
        self.push(v, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: S) -> Result<Var> {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a), &[a])
    }

    /// Adds a constant tensor (no gradient flows into it).
    pub fn add_const(&mut self, a: Var, c: &Tensor<S>) -> Result<Var> {
        let v = self.value(a).zip_map(c, "add_const", |x, y| x + y)?;
        self.push(v, Op::AddConst(a), &[a])
    }

    /// Elementwise product with a constant mask; the gradient is gated by
    /// the same mask.
    pub fn mask_mul(&mut self, a: Var, mask: Tensor<S>) -> Result<Var> {
        let v = self.value(a).zip_map(&mask, "mask_mul", |x, m| x * m)?;
        self.push(v, Op::MaskMul(a, mask), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: S) -> Result<Var> {
        let v = self.value(a).map(|x| if x > S::zero() { x } else { x * slope });
        self.push(v, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.abs());
        self.push(v, Op::Abs(a), &[a])
    }

    /// Elementwise `(x^2 + eta^2)^r`.
    pub fn charbonnier(&mut self, x: Var, r: S, eta: S) -> Result<Var> {
        let e2 = eta * eta;
        let v = self.value(x).map(|t| (t * t + e2).powf(r));
        self.push(v, Op::Charbonnier { x, r, eta }, &[x])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        self.push(v, Op::Reshape(a), &[a])
    }

    /// Channel `c` of a rank-4 tensor, shape `[B,1,H,W]`.
    pub fn channel(&mut self, a: Var, c: usize) -> Result<Var> {
        let v = self.value(a).channel(c)?;
        self.push(v, Op::Channel(a, c), &[a])
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_channels(&vals)?;
        self.push(v, Op::Concat(parts.to_vec()), parts)
    }

    /// Forward differences `x[.., i] - x[.., i + 1]` along axis 2 (rows) or
    /// axis 3 (columns) of a rank-4 tensor; the output is one shorter on
    /// that axis.
    pub fn neighbor_diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let (b, c, h, w) = t.dims4("neighbor_diff")?;
        let (oh, ow) = match axis {
            2 if h >= 2 => (h - 1, w),
            3 if w >= 2 => (h, w - 1),
            _ => return Err(Error::dim("neighbor_diff", format!("axis {axis} of shape {:?}", t.shape()))),
        };
        let (dy, dx) = if axis == 2 { (1, 0) } else { (0, 1) };
        let mut out = Tensor::zeros(&[b, c, oh, ow]);
        for bi in 0..b {
            for ch in 0..c {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let d = t.at4(bi, ch, yy, xx) - t.at4(bi, ch, yy + dy, xx + dx);
                        out.set4(bi, ch, yy, xx, d);
                    }
                }
            }
        }
        self.push(out, Op::NeighborDiff { x, axis }, &[x])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let v = ops::conv2d(self.value(x), self.value(w), stride, padding)?;
        self.push(v, Op::Conv2d { x, w, stride, padding }, &[x, w])
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let v = ops::conv_transpose2d(self.value(x), self.value(w), stride, padding)?;
        self.push(v, Op::ConvTranspose2d { x, w, stride, padding }, &[x, w])
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = ops::add_bias(self.value(x), self.value(bias))?;
        self.push(v, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn bilinear_sample(&mut self, image: Var, cx: Var, cy: Var) -> Result<Var> {
        let v = ops::bilinear_sample(self.value(image), self.value(cx), self.value(cy))?;
        self.push(v, Op::Bilinear { image, cx, cy }, &[image, cx, cy])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let v = ops::avg_pool2(self.value(x))?;
        self.push(v, Op::AvgPool2(x), &[x])
    }

    /// Heaviside spike `v > threshold`. Its backward rule is the surrogate
    /// `(1 / threshold) * [spike > 0]`.
    pub fn spike(&mut self, v: Var, threshold: S) -> Result<Var> {
        let out = self.value(v).map(|m| if m > threshold { S::one() } else { S::zero() });
        self.push(out, Op::Spike { v, threshold }, &[v])
    }

    /// Back-propagates from a one-element `loss`. Gradients of leaves that
    /// require them are added to what previous calls left there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if self.strict && !g.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient at {} node {i}", self.nodes[i].op.name())));
            }
            let contributions = self.local_grads(i, &g)?;
            for (input, gi) in contributions {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi)?,
                    slot @ None => *slot = Some(gi),
                }
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                match &mut self.nodes[i].grad {
                    Some(acc) => acc.add_assign(&g)?,
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, g: &Tensor<S>) -> Result<Vec<(Var, Tensor<S>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-S::one()))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), "mul_grad", |x, y| x * y)?),
                (*b, g.zip_map(val(*a), "mul_grad", |x, y| x * y)?),
            ],
            Op::Scale(a, k) => vec![(*a, g.scale(*k))],
            Op::AddScalar(a) | Op::AddConst(a) => vec![(*a, g.clone())],
            Op::MaskMul(a, m) => vec![(*a, g.zip_map(m, "mask_grad", |x, y| x * y)?)],
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                vec![(*a, g.zip_map(val(*a), "leaky_grad", |gv, x| if x > S::zero() { gv } else { gv * s })?)]
            }
            Op::Abs(a) => vec![(*a, g.zip_map(val(*a), "abs_grad", |gv, x| gv * sign(x))?)],
            Op::Charbonnier { x, r, eta } => {
                let (r, e2) = (*r, *eta * *eta);
                let two = S::lit(2.0);
                vec![(
                    *x,
                    g.zip_map(val(*x), "charbonnier_grad", |gv, t| gv * r * (t * t + e2).powf(r - S::one()) * two * t)?,
                )]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Reshape(a) => vec![(*a, g.clone().reshape(val(*a).shape())?)],
            Op::Channel(a, c) => {
                let src = val(*a);
                let (b, cs, h, w) = src.dims4("channel_grad")?;
                let mut gi = Tensor::zeros(src.shape());
                for bi in 0..b {
                    let dst = (bi * cs + c) * h * w;
                    gi.data_mut()[dst..dst + h * w].copy_from_slice(&g.data()[bi * h * w..(bi + 1) * h * w]);
                }
                vec![(*a, gi)]
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| val(*p).shape()[1]).collect();
                parts.iter().copied().zip(g.split_channels(&widths)?).collect()
            }
            Op::NeighborDiff { x, axis } => {
                let src = val(*x);
                let (b, c, oh, ow) = g.dims4("neighbor_diff_grad")?;
                let (dy, dx) = if *axis == 2 { (1, 0) } else { (0, 1) };
                let mut gi = Tensor::zeros(src.shape());
                for bi in 0..b {
                    for ch in 0..c {
                        for yy in 0..oh {
                            for xx in 0..ow {
                                let gv = g.at4(bi, ch, yy, xx);
                                let a = gi.at4(bi, ch, yy, xx);
                                gi.set4(bi, ch, yy, xx, a + gv);
                                let n = gi.at4(bi, ch, yy + dy, xx + dx);
                                gi.set4(bi, ch, yy + dy, xx + dx, n - gv);
                            }
                        }
                    }
                }
                vec![(*x, gi)]
            }
            Op::Conv2d { x, w, stride, padding } => vec![
                (*x, ops::conv2d_grad_input(g, val(*w), val(*x).shape(), *stride, *padding)?),
                (*w, ops::conv2d_grad_weight(val(*x), g, val(*w).shape(), *stride, *padding)?),
            ],
            Op::ConvTranspose2d { x, w, stride, padding } => vec![
                (*x, ops::conv_transpose2d_grad_input(g, val(*w), *stride, *padding)?),
                (*w, ops::conv_transpose2d_grad_weight(val(*x), g, val(*w).shape(), *stride, *padding)?),
            ],
            Op::AddBias(x, b) => vec![(*x, g.clone()), (*b, ops::bias_grad(g)?)],
            Op::Bilinear { image, cx, cy } => {
                let (gi, gx, gy) = ops::bilinear_sample_grad(val(*image), val(*cx), val(*cy), g)?;
                vec![(*image, gi), (*cx, gx), (*cy, gy)]
            }
            Op::AvgPool2(x) => vec![(*x, ops::avg_pool2_grad(val(*x).shape(), g)?)],
            Op::Spike { v, threshold } => {
                let inv = S::one() / *threshold;
                vec![(
                    *v,
                    g.zip_map(&node.value, "spike_grad", |gv, o| if o > S::zero() { gv * inv } else { S::zero() })?,
                )]
            }
        };
        Ok(out)
    }
}

fn sign<S: Scalar>(x: S) -> S {
    if x > S::zero() {
        S::one()
    } else if x < S::zero() {
        -S::one()
    } else {
        S::zero()
    }
}
