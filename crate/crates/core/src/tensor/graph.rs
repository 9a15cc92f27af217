//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is the tape: every operation appends a node holding its
//! forward value and enough context to run its backward rule. Nodes are only
//! ever appended, so inputs always precede the nodes that consume them and a
//! single reverse sweep visits each node once.

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::broadcast::{broadcast_shape, expanded_strides, for_each_pair};
use super::kernels;
use super::Tensor;

static NEXT_GRAPH_ID: AtomicUsize = AtomicUsize::new(0);

/// Lower clamp applied to predictions inside [`Graph::bce_loss`].
pub const BCE_EPSILON: f64 = 1e-7;

/// Handle to a value recorded on a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId {
    graph: usize,
    index: usize,
}

/// Backward rule of a user-supplied operation: given the input values, the
/// output value and the upstream gradient, return one gradient per input.
pub type BackwardFn<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &Tensor<T>) -> Vec<Tensor<T>>>;

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Minimum(usize, usize),
    SelectPositive { cond: usize, a: usize, b: usize },
    Relu(usize),
    Sigmoid(usize),
    Conv2d { x: usize, weight: usize, bias: usize, stride: usize, padding: usize },
    MaxPool2d { x: usize, argmax: Vec<usize> },
    GlobalAvgPool(usize),
    GlobalMaxPool { x: usize, argmax: Vec<usize> },
    FullyConnected { x: usize, weight: usize, bias: usize },
    Reshape(usize),
    Sum(usize),
    Bce { pred: usize, target: usize },
    Mse { pred: usize, target: usize },
    Custom { inputs: Vec<usize>, backward: BackwardFn<T> },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Mul(a, b) | Op::Minimum(a, b) => vec![*a, *b],
            Op::SelectPositive { cond, a, b } => vec![*cond, *a, *b],
            Op::Relu(x) | Op::Sigmoid(x) | Op::GlobalAvgPool(x) | Op::Reshape(x) | Op::Sum(x) => vec![*x],
            Op::MaxPool2d { x, .. } | Op::GlobalMaxPool { x, .. } => vec![*x],
            Op::Conv2d { x, weight, bias, .. } | Op::FullyConnected { x, weight, bias } => {
                vec![*x, *weight, *bias]
            }
            Op::Bce { pred, target } | Op::Mse { pred, target } => vec![*pred, *target],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    id: usize,
    nodes: Vec<Node<T>>,
    track_ties: bool,
    tie_gap: f64,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            track_ties: false,
            tie_gap: f64::INFINITY,
        }
    }

    /// A graph that records, for every non-smooth op, how close its inputs
    /// came to a switching point (see [`Graph::tie_gap`]).
    pub fn with_tie_tracking() -> Self {
        Graph { track_ties: true, ..Self::new() }
    }

    /// Smallest distance to a kink (relu at 0, min/max ties) seen so far.
    /// Infinite unless tie tracking is enabled.
    pub fn tie_gap(&self) -> f64 {
        self.tie_gap
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, id: NodeId) -> Result<usize> {
        if id.graph != self.id || id.index >= self.nodes.len() {
            return Err(Error::ForeignNode);
        }
        Ok(id.index)
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.index(id)?].value)
    }

    pub fn requires_grad(&self, id: NodeId) -> Result<bool> {
        Ok(self.nodes[self.index(id)?].requires_grad)
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    fn note_gap(&mut self, gap: impl FnOnce() -> f64) {
        if self.track_ties {
            self.tie_gap = self.tie_gap.min(gap());
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<NodeId> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(NodeId { graph: self.id, index: self.nodes.len() - 1 })
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        NodeId { graph: self.id, index: self.nodes.len() - 1 }
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: impl FnOnce(usize, usize) -> Op<T>,
    ) -> Result<NodeId> {
        let (ai, bi) = (self.index(a)?, self.index(b)?);
        let (av, bv) = (self.val(ai), self.val(bi));
        let shape = broadcast_shape(av.shape(), bv.shape()).map_err(|e| match e {
            Error::Shape { detail, .. } => Error::Shape { op: name, detail },
            other => other,
        })?;
        let data = if av.shape() == bv.shape() {
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = expanded_strides(av.shape(), &shape);
            let sb = expanded_strides(bv.shape(), &shape);
            let mut out = vec![T::zero(); shape.iter().product()];
            let (ad, bd) = (av.data(), bv.data());
            for_each_pair(&shape, &sa, &sb, |o, i, j| out[o] = f(ad[i], bd[j]));
            out
        };
        let value = Tensor::new(shape, data)?;
        self.push(name, value, op(ai, bi))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Elementwise minimum. On exact ties the gradient goes to `a`.
    pub fn minimum(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let id = self.binary("minimum", a, b, |x, y| if y < x { y } else { x }, Op::Minimum)?;
        if self.track_ties {
            let (ai, bi) = (self.index(a)?, self.index(b)?);
            let shape = self.nodes[id.index].value.shape().to_vec();
            let sa = expanded_strides(self.val(ai).shape(), &shape);
            let sb = expanded_strides(self.val(bi).shape(), &shape);
            let (ad, bd) = (self.val(ai).data(), self.val(bi).data());
            let mut gap = f64::INFINITY;
            for_each_pair(&shape, &sa, &sb, |_, i, j| gap = gap.min((ad[i] - bd[j]).abs().as_f64()));
            self.note_gap(|| gap);
        }
        Ok(id)
    }

    /// `a` where `cond > 0`, else `b`. All three operands share one shape;
    /// `cond` is not differentiated.
    pub fn select_positive(&mut self, cond: NodeId, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ci, ai, bi) = (self.index(cond)?, self.index(a)?, self.index(b)?);
        let (cv, av, bv) = (self.val(ci), self.val(ai), self.val(bi));
        if cv.shape() != av.shape() || av.shape() != bv.shape() {
            return Err(Error::shape(
                "select_positive",
                format!("{:?}, {:?}, {:?}", cv.shape(), av.shape(), bv.shape()),
            ));
        }
        let data = cv
            .data()
            .iter()
            .zip(av.data().iter().zip(bv.data()))
            .map(|(&c, (&x, &y))| if c > T::zero() { x } else { y })
            .collect();
        let value = Tensor::new(cv.shape().to_vec(), data)?;
        let gap = cv.data().iter().fold(f64::INFINITY, |g, v| g.min(v.abs().as_f64()));
        self.note_gap(|| gap);
        self.push("select_positive", value, Op::SelectPositive { cond: ci, a: ai, b: bi })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let xi = self.index(x)?;
        let value = self.val(xi).map(|v| v.max(T::zero()));
        let gap = self.val(xi).data().iter().fold(f64::INFINITY, |g, v| g.min(v.abs().as_f64()));
        self.note_gap(|| gap);
        self.push("relu", value, Op::Relu(xi))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let xi = self.index(x)?;
        let value = self.val(xi).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push("sigmoid", value, Op::Sigmoid(xi))
    }

    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        let (xi, wi, bi) = (self.index(x)?, self.index(weight)?, self.index(bias)?);
        let value = kernels::conv2d(self.val(xi), self.val(wi), self.val(bi), stride, padding)?;
        self.push("conv2d", value, Op::Conv2d { x: xi, weight: wi, bias: bi, stride, padding })
    }

    pub fn maxpool2d(&mut self, x: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let xi = self.index(x)?;
        let (value, argmax) = kernels::maxpool2d(self.val(xi), k, stride)?;
        if self.track_ties {
            let gap = kernels::maxpool2d_tie_gap(self.val(xi), k, stride, &argmax);
            self.note_gap(|| gap);
        }
        self.push("maxpool2d", value, Op::MaxPool2d { x: xi, argmax })
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xi = self.index(x)?;
        let value = kernels::global_avg_pool(self.val(xi))?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool(xi))
    }

    pub fn global_max_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let xi = self.index(x)?;
        let (value, argmax) = kernels::global_max_pool(self.val(xi))?;
        if self.track_ties {
            let gap = kernels::global_max_pool_tie_gap(self.val(xi), &argmax);
            self.note_gap(|| gap);
        }
        self.push("global_max_pool", value, Op::GlobalMaxPool { x: xi, argmax })
    }

    pub fn fully_connected(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xi, wi, bi) = (self.index(x)?, self.index(weight)?, self.index(bias)?);
        let value = kernels::fully_connected(self.val(xi), self.val(wi), self.val(bi))?;
        self.push("fully_connected", value, Op::FullyConnected { x: xi, weight: wi, bias: bi })
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        let xi = self.index(x)?;
        let value = self.val(xi).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(xi))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let xi = self.index(x)?;
        let value = Tensor::scalar(self.val(xi).sum());
        self.push("sum", value, Op::Sum(xi))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.val(a).shape(), self.val(b).shape())));
        }
        Ok(())
    }

    /// Mean binary cross-entropy; predictions are clamped to `[ε, 1−ε]`.
    pub fn bce_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (pi, ti) = (self.index(pred)?, self.index(target)?);
        self.same_shape("bce_loss", pi, ti)?;
        let eps = T::lit(BCE_EPSILON);
        let n = T::lit(self.val(pi).numel() as f64);
        let total = self
            .val(pi)
            .data()
            .iter()
            .zip(self.val(ti).data())
            .fold(T::zero(), |acc, (&p, &t)| {
                let p = p.max(eps).min(T::one() - eps);
                acc - (t * p.ln() + (T::one() - t) * (T::one() - p).ln())
            });
        self.push("bce_loss", Tensor::scalar(total / n), Op::Bce { pred: pi, target: ti })
    }

    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        let (pi, ti) = (self.index(pred)?, self.index(target)?);
        self.same_shape("mse_loss", pi, ti)?;
        let n = T::lit(self.val(pi).numel() as f64);
        let total = self
            .val(pi)
            .data()
            .iter()
            .zip(self.val(ti).data())
            .fold(T::zero(), |acc, (&p, &t)| acc + (p - t) * (p - t));
        self.push("mse_loss", Tensor::scalar(total / n), Op::Mse { pred: pi, target: ti })
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[NodeId], value: Tensor<T>, backward: BackwardFn<T>) -> Result<NodeId> {
        let inputs = inputs.iter().map(|&id| self.index(id)).collect::<Result<Vec<_>>>()?;
        self.push("custom", value, Op::Custom { inputs, backward })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let li = self.index(loss)?;
        if !self.val(li).is_scalar() {
            return Err(Error::NotScalar(self.val(li).shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=li).map(|_| None).collect();
        grads[li] = Some(Tensor::full(self.val(li).shape().to_vec(), T::one()));

        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (input, ig) in self.input_grads(node, &g)? {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&ig),
                    slot @ None => *slot = Some(ig),
                }
            }
            grads[i] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate().take(li + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros_like(&node.value));
            }
        }
        Ok(Gradients { graph: self.id, grads })
    }

    fn input_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => {
                vec![(*a, reduce_to(g, self.val(*a).shape())), (*b, reduce_to(g, self.val(*b).shape()))]
            }
            Op::Mul(a, b) => {
                let ga = broadcast_zip(g, self.val(*b), |gv, bv| gv * bv);
                let gb = broadcast_zip(g, self.val(*a), |gv, av| gv * av);
                vec![(*a, reduce_to(&ga, self.val(*a).shape())), (*b, reduce_to(&gb, self.val(*b).shape()))]
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let sa = expanded_strides(av.shape(), out.shape());
                let sb = expanded_strides(bv.shape(), out.shape());
                let mut ga = Tensor::zeros_like(av);
                let mut gb = Tensor::zeros_like(bv);
                {
                    let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                    let (gad, gbd) = (ga.data_mut(), gb.data_mut());
                    for_each_pair(out.shape(), &sa, &sb, |o, i, j| {
                        if bd[j] < ad[i] {
                            gbd[j] += gd[o];
                        } else {
                            gad[i] += gd[o];
                        }
                    });
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::SelectPositive { cond, a, b } => {
                let c = self.val(*cond).data();
                let ga = Tensor::from_fn(g.shape().to_vec(), |i| if c[i] > T::zero() { g.data()[i] } else { T::zero() });
                let gb = Tensor::from_fn(g.shape().to_vec(), |i| if c[i] > T::zero() { T::zero() } else { g.data()[i] });
                vec![(*a, ga), (*b, gb)]
            }
            Op::Relu(x) => {
                let xd = self.val(*x).data();
                let gx = Tensor::from_fn(g.shape().to_vec(), |i| if xd[i] > T::zero() { g.data()[i] } else { T::zero() });
                vec![(*x, gx)]
            }
            Op::Sigmoid(x) => {
                let od = out.data();
                let gx = Tensor::from_fn(g.shape().to_vec(), |i| g.data()[i] * od[i] * (T::one() - od[i]));
                vec![(*x, gx)]
            }
            Op::Conv2d { x, weight, bias, stride, padding } => {
                let cg = kernels::conv2d_backward(self.val(*x), self.val(*weight), g, *stride, *padding)?;
                vec![(*x, cg.x), (*weight, cg.weight), (*bias, cg.bias)]
            }
            Op::MaxPool2d { x, argmax } | Op::GlobalMaxPool { x, argmax } => {
                vec![(*x, kernels::scatter_argmax(self.val(*x).shape(), argmax, g))]
            }
            Op::GlobalAvgPool(x) => vec![(*x, kernels::global_avg_pool_backward(self.val(*x).shape(), g))],
            Op::FullyConnected { x, weight, bias } => {
                let fg = kernels::fully_connected_backward(self.val(*x), self.val(*weight), g)?;
                vec![(*x, fg.x), (*weight, fg.weight), (*bias, fg.bias)]
            }
            Op::Reshape(x) => vec![(*x, g.clone().reshape(self.val(*x).shape().to_vec())?)],
            Op::Sum(x) => vec![(*x, Tensor::full(self.val(*x).shape().to_vec(), g.data()[0]))],
            Op::Bce { pred, target } => {
                let (pv, tv) = (self.val(*pred), self.val(*target));
                let eps = T::lit(BCE_EPSILON);
                let scale = g.data()[0] / T::lit(pv.numel() as f64);
                let clamp = |p: T| p.max(eps).min(T::one() - eps);
                let gp = Tensor::from_fn(pv.shape().to_vec(), |i| {
                    let (p, t) = (clamp(pv.data()[i]), tv.data()[i]);
                    scale * (p - t) / (p * (T::one() - p))
                });
                let gt = Tensor::from_fn(pv.shape().to_vec(), |i| {
                    let p = clamp(pv.data()[i]);
                    scale * ((T::one() - p).ln() - p.ln())
                });
                vec![(*pred, gp), (*target, gt)]
            }
            Op::Mse { pred, target } => {
                let (pv, tv) = (self.val(*pred), self.val(*target));
                let scale = T::lit(2.0) * g.data()[0] / T::lit(pv.numel() as f64);
                let gp = Tensor::from_fn(pv.shape().to_vec(), |i| scale * (pv.data()[i] - tv.data()[i]));
                let gt = gp.map(|v| -v);
                vec![(*pred, gp), (*target, gt)]
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(|&i| self.val(i)).collect();
                let gs = backward(&values, out, g);
                if gs.len() != inputs.len() {
                    return Err(Error::shape("custom", "backward returned wrong number of gradients"));
                }
                for (gi, v) in gs.iter().zip(&values) {
                    if gi.shape() != v.shape() {
                        return Err(Error::shape("custom", "backward gradient shape differs from input"));
                    }
                }
                inputs.iter().copied().zip(gs).collect()
            }
        })
    }
}

/// `f(g[o], other[broadcast(o)])` over the shape of `g`.
fn broadcast_zip<T: Scalar>(g: &Tensor<T>, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    if g.shape() == other.shape() {
        return Tensor::from_fn(g.shape().to_vec(), |i| f(g.data()[i], other.data()[i]));
    }
    let so = expanded_strides(other.shape(), g.shape());
    let id: Vec<usize> = expanded_strides(g.shape(), g.shape());
    let mut out = Tensor::zeros_like(g);
    {
        let (gd, od) = (g.data(), other.data());
        let outd = out.data_mut();
        for_each_pair(g.shape(), &id, &so, |o, i, j| outd[o] = f(gd[i], od[j]));
    }
    out
}

/// Sums `g` over the axes along which `shape` was expanded.
fn reduce_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let sr = expanded_strides(shape, g.shape());
    let mut out = Tensor::zeros(shape.to_vec());
    {
        let gd = g.data();
        let od = out.data_mut();
        for_each_pair(g.shape(), &sr, &sr, |o, i, _| od[i] += gd[o]);
    }
    out
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    graph: usize,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `id`; `None` for nodes that do
    /// not require gradients or were recorded after the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        if id.graph != self.graph {
            return None;
        }
        self.grads.get(id.index).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        if id.graph != self.graph {
            return None;
        }
        self.grads.get_mut(id.index).and_then(Option::take)
    }
}
