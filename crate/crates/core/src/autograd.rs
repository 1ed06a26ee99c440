//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s. Nodes are appended
//! in creation order, so reverse creation order is a valid topological order
//! for [`Graph::backward`]. Constants (inputs, frozen parameters, masks) are
//! leaves with `requires_grad = false`; ops whose inputs are all constant are
//! skipped during the backward sweep.

use std::cell::RefCell;
use std::rc::Rc;

use crate::kernels::{self, BatchNormCache};
use crate::tensor::Tensor;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `scale * x + shift`
    Affine(usize, f64),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    /// `x - s` with `s` a single-element var broadcast over `x`.
    SubScalar(usize, usize),
    Sigmoid(usize),
    /// `ln(max(x, floor))`, gradient zero where the floor is active.
    LnClamped(usize, f64),
    LeakyRelu(usize, f64),
    Conv2d { input: usize, weight: usize, bias: Option<usize>, stride: usize, padding: usize },
    ConcatChannels(Vec<usize>),
    Upsample2x(usize),
    AvgPool2(usize),
    GlobalAvgPool(usize),
    BatchNorm { input: usize, gamma: usize, beta: usize, cache: BatchNormCache },
    Linear { input: usize, weight: usize, bias: usize },
    Reshape(usize),
    SoftmaxCrossEntropy { logits: usize, probs: Vec<f64>, labels: Vec<usize>, sample_weights: Vec<f64>, norm: f64 },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of a differentiable computation.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by var.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros of its shape when no gradient reached it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(var.shape().as_slice()))
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, requires_grad });
        Var { graph: self, id: nodes.len() - 1 }
    }

    /// Trainable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse sweep from a single-element `root`.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(root.graph, self), "root belongs to a different graph");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::new(nodes[root.id].value.shape().to_vec(), vec![1.0]));

        let accumulate = |grads: &mut Vec<Option<Tensor>>, id: usize, g: Tensor| {
            if !nodes[id].requires_grad {
                return;
            }
            match &mut grads[id] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let needs = |i: usize| nodes[i].requires_grad;
            let val = |i: usize| nodes[i].value.as_ref();
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Add(a, b) => {
                    if needs(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    if needs(*b) {
                        accumulate(&mut grads, *b, g.map(|v| -v));
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads, *a, zip_map(&g, val(*b), |g, y| g * y));
                    }
                    if needs(*b) {
                        accumulate(&mut grads, *b, zip_map(&g, val(*a), |g, x| g * x));
                    }
                }
                Op::Affine(a, scale) => accumulate(&mut grads, *a, g.map(|v| v * scale)),
                Op::Abs(a) => accumulate(&mut grads, *a, zip_map(&g, val(*a), |g, x| g * sign(x))),
                Op::Sum(a) => {
                    let x = val(*a);
                    accumulate(&mut grads, *a, Tensor::full(x.shape(), g.item()));
                }
                Op::Mean(a) => {
                    let x = val(*a);
                    accumulate(&mut grads, *a, Tensor::full(x.shape(), g.item() / x.len() as f64));
                }
                Op::SubScalar(a, s) => {
                    if needs(*s) {
                        let total = -g.sum();
                        accumulate(&mut grads, *s, Tensor::new(val(*s).shape().to_vec(), vec![total]));
                    }
                    accumulate(&mut grads, *a, g);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref();
                    accumulate(&mut grads, *a, zip_map(&g, y, |g, y| g * y * (1.0 - y)));
                }
                Op::LnClamped(a, floor) => {
                    let floor = *floor;
                    accumulate(
                        &mut grads,
                        *a,
                        zip_map(&g, val(*a), |g, x| if x > floor { g / x } else { 0.0 }),
                    );
                }
                Op::LeakyRelu(a, slope) => {
                    let slope = *slope;
                    accumulate(
                        &mut grads,
                        *a,
                        zip_map(&g, val(*a), |g, x| if x > 0.0 { g } else { g * slope }),
                    );
                }
                Op::Conv2d { input, weight, bias, stride, padding } => {
                    let cg = kernels::conv2d_backward(
                        val(*input),
                        val(*weight),
                        &g,
                        *stride,
                        *padding,
                        needs(*input),
                        needs(*weight),
                        bias.is_some_and(needs),
                    );
                    if let Some(dx) = cg.input {
                        accumulate(&mut grads, *input, dx);
                    }
                    if let Some(dw) = cg.weight {
                        accumulate(&mut grads, *weight, dw);
                    }
                    if let (Some(b), Some(db)) = (bias, cg.bias) {
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::ConcatChannels(parts) => {
                    let (n, _, h, w) = g.dims4();
                    let hw = h * w;
                    let total_c = g.shape()[1];
                    let mut c0 = 0;
                    for &p in parts {
                        let pc = val(p).shape()[1];
                        if needs(p) {
                            let mut d = Vec::with_capacity(n * pc * hw);
                            for b in 0..n {
                                let off = (b * total_c + c0) * hw;
                                d.extend_from_slice(&g.data()[off..off + pc * hw]);
                            }
                            accumulate(&mut grads, p, Tensor::new(vec![n, pc, h, w], d));
                        }
                        c0 += pc;
                    }
                }
                Op::Upsample2x(a) => accumulate(&mut grads, *a, kernels::upsample_nearest2x_backward(&g)),
                Op::AvgPool2(a) => accumulate(&mut grads, *a, kernels::avg_pool2_backward(&g, val(*a).shape())),
                Op::GlobalAvgPool(a) => {
                    let (n, c, h, w) = val(*a).dims4();
                    let hw = h * w;
                    let mut d = vec![0.0; n * c * hw];
                    for (i, chunk) in d.chunks_mut(hw).enumerate() {
                        chunk.fill(g.data()[i] / hw as f64);
                    }
                    accumulate(&mut grads, *a, Tensor::new(vec![n, c, h, w], d));
                }
                Op::BatchNorm { input, gamma, beta, cache } => {
                    let (dx, dgamma, dbeta) = kernels::batch_norm_backward(&g, val(*gamma), cache);
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *gamma, dgamma);
                    accumulate(&mut grads, *beta, dbeta);
                }
                Op::Linear { input, weight, bias } => {
                    let (dx, dw, db) = kernels::linear_backward(val(*input), val(*weight), &g);
                    accumulate(&mut grads, *input, dx);
                    accumulate(&mut grads, *weight, dw);
                    accumulate(&mut grads, *bias, db);
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    accumulate(&mut grads, *a, g.reshape(shape));
                }
                Op::SoftmaxCrossEntropy { logits, probs, labels, sample_weights, norm } => {
                    let k = val(*logits).shape()[1];
                    let up = g.item() / norm;
                    let mut d = probs.clone();
                    for (i, row) in d.chunks_mut(k).enumerate() {
                        row[labels[i]] -= 1.0;
                        for v in row.iter_mut() {
                            *v *= sample_weights[i] * up;
                        }
                    }
                    accumulate(&mut grads, *logits, Tensor::new(vec![labels.len(), k], d));
                }
            }
        }
        Gradients { grads }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.requires(self.id)
    }

    /// Same value, cut from the tape.
    pub fn detach(&self) -> Var<'g> {
        self.graph.constant(self.value().as_ref().clone())
    }

    fn unary(&self, value: Tensor, op: Op) -> Var<'g> {
        self.graph.push(value, op, self.requires_grad())
    }

    fn binary(&self, other: &Var<'g>, value: Tensor, op: Op) -> Var<'g> {
        assert!(std::ptr::eq(self.graph, other.graph), "vars from different graphs");
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(value, op, rg)
    }

    fn same_shape(&self, other: &Var<'g>, what: &str) -> (Rc<Tensor>, Rc<Tensor>) {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
        (a, b)
    }

    pub fn add(&self, other: &Var<'g>) -> Var<'g> {
        let (a, b) = self.same_shape(other, "add");
        self.binary(other, zip_map(&a, &b, |x, y| x + y), Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'g>) -> Var<'g> {
        let (a, b) = self.same_shape(other, "sub");
        self.binary(other, zip_map(&a, &b, |x, y| x - y), Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'g>) -> Var<'g> {
        let (a, b) = self.same_shape(other, "mul");
        self.binary(other, zip_map(&a, &b, |x, y| x * y), Op::Mul(self.id, other.id))
    }

    pub fn affine(&self, scale: f64, shift: f64) -> Var<'g> {
        let v = self.value().map(|x| scale * x + shift);
        self.unary(v, Op::Affine(self.id, scale))
    }

    pub fn scale(&self, scale: f64) -> Var<'g> {
        self.affine(scale, 0.0)
    }

    pub fn abs(&self) -> Var<'g> {
        let v = self.value().map(f64::abs);
        self.unary(v, Op::Abs(self.id))
    }

    pub fn sum(&self) -> Var<'g> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g> {
        let x = self.value();
        let v = Tensor::scalar(x.sum() / x.len() as f64);
        self.unary(v, Op::Mean(self.id))
    }

    /// Subtract a single-element var from every element.
    pub fn sub_scalar(&self, s: &Var<'g>) -> Var<'g> {
        let sv = s.value().item();
        let v = self.value().map(|x| x - sv);
        self.binary(s, v, Op::SubScalar(self.id, s.id))
    }

    pub fn sigmoid(&self) -> Var<'g> {
        let v = self.value().map(|x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        });
        self.unary(v, Op::Sigmoid(self.id))
    }

    pub fn ln_clamped(&self, floor: f64) -> Var<'g> {
        let v = self.value().map(|x| x.max(floor).ln());
        self.unary(v, Op::LnClamped(self.id, floor))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'g> {
        let v = self.value().map(|x| if x > 0.0 { x } else { slope * x });
        self.unary(v, Op::LeakyRelu(self.id, slope))
    }

    pub fn conv2d(&self, weight: &Var<'g>, bias: Option<&Var<'g>>, stride: usize, padding: usize) -> Var<'g> {
        let out = kernels::conv2d(
            &self.value(),
            &weight.value(),
            bias.map(|b| b.value()).as_deref(),
            stride,
            padding,
        );
        let rg = self.requires_grad() || weight.requires_grad() || bias.is_some_and(|b| b.requires_grad());
        self.graph.push(
            out,
            Op::Conv2d { input: self.id, weight: weight.id, bias: bias.map(|b| b.id), stride, padding },
            rg,
        )
    }

    pub fn concat_channels(parts: &[Var<'g>]) -> Var<'g> {
        assert!(!parts.is_empty());
        let graph = parts[0].graph;
        let vals: Vec<Rc<Tensor>> = parts.iter().map(Var::value).collect();
        let (n, _, h, w) = vals[0].dims4();
        let total_c: usize = vals.iter().map(|v| v.shape()[1]).sum();
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for v in &vals {
                let (vn, c, vh, vw) = v.dims4();
                assert_eq!((vn, vh, vw), (n, h, w), "concat: incompatible shapes");
                data.extend_from_slice(&v.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let rg = parts.iter().any(Var::requires_grad);
        graph.push(
            Tensor::new(vec![n, total_c, h, w], data),
            Op::ConcatChannels(parts.iter().map(|p| p.id).collect()),
            rg,
        )
    }

    pub fn upsample_nearest2x(&self) -> Var<'g> {
        let v = kernels::upsample_nearest2x(&self.value());
        self.unary(v, Op::Upsample2x(self.id))
    }

    pub fn avg_pool2(&self) -> Var<'g> {
        let v = kernels::avg_pool2(&self.value());
        self.unary(v, Op::AvgPool2(self.id))
    }

    /// `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&self) -> Var<'g> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let data = x.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        self.unary(Tensor::new(vec![n, c], data), Op::GlobalAvgPool(self.id))
    }

    pub fn batch_norm(&self, gamma: &Var<'g>, beta: &Var<'g>, eps: f64) -> Var<'g> {
        let (out, cache) = kernels::batch_norm(&self.value(), &gamma.value(), &beta.value(), eps);
        let rg = self.requires_grad() || gamma.requires_grad() || beta.requires_grad();
        self.graph.push(out, Op::BatchNorm { input: self.id, gamma: gamma.id, beta: beta.id, cache }, rg)
    }

    pub fn linear(&self, weight: &Var<'g>, bias: &Var<'g>) -> Var<'g> {
        let out = kernels::linear(&self.value(), &weight.value(), &bias.value());
        let rg = self.requires_grad() || weight.requires_grad() || bias.requires_grad();
        self.graph.push(out, Op::Linear { input: self.id, weight: weight.id, bias: bias.id }, rg)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Var<'g> {
        let v = self.value().as_ref().clone().reshape(shape);
        self.unary(v, Op::Reshape(self.id))
    }

    /// `[n, ...] -> [n, prod(...)]`.
    pub fn flatten(&self) -> Var<'g> {
        let shape = self.shape();
        let rest = shape[1..].iter().product();
        self.reshape(vec![shape[0], rest])
    }

    /// Weighted softmax cross-entropy over logits `[n, k]`:
    /// `sum_i w_i * -log softmax(x_i)[y_i] / norm`.
    pub fn softmax_cross_entropy(&self, labels: &[usize], sample_weights: &[f64], norm: f64) -> Var<'g> {
        let x = self.value();
        let (n, k) = (x.shape()[0], x.shape()[1]);
        assert_eq!(labels.len(), n);
        assert_eq!(sample_weights.len(), n);
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &x.data()[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / z;
            }
            let log_p = row[labels[i]] - max - z.ln();
            loss -= sample_weights[i] * log_p;
        }
        self.unary(
            Tensor::scalar(loss / norm),
            Op::SoftmaxCrossEntropy {
                logits: self.id,
                probs,
                labels: labels.to_vec(),
                sample_weights: sample_weights.to_vec(),
                norm,
            },
        )
    }
}
