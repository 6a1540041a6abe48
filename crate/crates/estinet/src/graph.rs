//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Graph`] is rebuilt for every batch (define-by-run). Nodes hold their
//! forward value; [`Graph::backward`] walks the tape in reverse, accumulating
//! gradients into a [`ParamStore`]. Two properties the training procedures
//! rely on are first-class here:
//!
//! - **Gradient stops**: `backward` takes a set of node ids below which no
//!   gradient is propagated. A stopped path contributes exactly zero (the
//!   gradient is never pushed), not approximately zero.
//! - **Multiple phases**: `backward` may be called several times on one
//!   graph with different loss seeds and stop sets; parameter gradients
//!   accumulate across calls.
//!
//! Scalars are generic over `f32`/`f64` so gradient correctness can be
//! checked against central finite differences in double precision.

use std::collections::HashSet;
use std::ops::AddAssign;

use ndarray::{ArrayD, ArrayViewD, Axis, Ix2, IxDyn};

/// Element type of the compute graph.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + AddAssign
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// A named trainable array with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<S: Scalar> {
    pub name: String,
    pub value: ArrayD<S>,
    pub grad: ArrayD<S>,
    pub trainable: bool,
}

/// Flat collection of model parameters, addressed by id or name prefix.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar> {
    params: Vec<Param<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<S>) -> ParamId {
        let grad = ArrayD::zeros(value.raw_dim());
        self.params.push(Param { name: name.into(), value, grad, trainable: true });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<S> {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_by_prefix(&self, prefix: &str) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.name.starts_with(prefix))
            .map(|(id, _)| id)
            .collect()
    }

    pub fn set_trainable_by_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut() {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.grad.fill(S::zero());
        }
    }

    /// Raw little-endian bytes of every value, in storage order. Used to
    /// assert bit-exact freezing.
    pub fn value_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in &self.params {
            for &v in p.value.iter() {
                out.extend_from_slice(&v.to_f64().to_le_bytes());
            }
        }
        out
    }
}

#[derive(Debug)]
enum Op<S: Scalar> {
    Leaf,
    Param(ParamId),
    Add(NodeId, NodeId),
    /// x (.., D) + b (D)
    AddBias(NodeId, NodeId),
    /// x (B, rest..) + p (rest..)
    AddBcast0(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, S),
    /// (.., K) x (K, N)
    Linear(NodeId, NodeId),
    /// (B, M, K) x (B, K, N); `trans_b` treats b as (B, N, K)
    Bmm { a: NodeId, b: NodeId, trans_b: bool },
    /// softmax over the last axis; value is the saved output
    Softmax(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    /// normalize over the last axis, then scale/shift
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, eps: S },
    Concat { parts: Vec<NodeId>, axis: usize },
    Narrow { x: NodeId, axis: usize, start: usize, len: usize },
    Reshape(NodeId),
    Permute { x: NodeId, axes: Vec<usize> },
    /// table (V, D) gathered into (G, D) as per-group row means; empty
    /// groups yield zero rows
    GatherMeanRows { table: NodeId, groups: Vec<Vec<usize>> },
    /// x (N, ..) -> (K, ..) selecting rows along axis 0
    SelectRows { x: NodeId, idx: Vec<usize> },
    /// forward: the provided hard value; backward: identity into `soft`
    StraightThrough { soft: NodeId },
    /// mean weighted cross-entropy: probs/target (.., C), weights = leading
    /// shape; value is 0-d
    CrossEntropyMean { probs: NodeId, target: ArrayD<S>, weights: ArrayD<S> },
}

struct Node<S: Scalar> {
    value: ArrayD<S>,
    op: Op<S>,
}

/// A define-by-run tape of operations.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn as2<S: Scalar>(a: &ArrayD<S>, m: usize, k: usize) -> ndarray::ArrayView2<'_, S> {
    a.view().into_shape_with_order((m, k)).expect("contiguous 2-d view")
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<S>, op: Op<S>) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<S> {
        &self.nodes[id.0].value
    }

    pub fn constant(&mut self, value: ArrayD<S>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_constant(&mut self, v: S) -> NodeId {
        self.push(ArrayD::from_elem(IxDyn(&[]), v), Op::Leaf)
    }

    /// Leaf bound to a parameter; the current value is copied in.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> NodeId {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    /// Leaf copy of an existing node's value (no gradient path).
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        self.push(self.value(x).clone(), Op::Leaf)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        debug_assert_eq!(self.value(a).shape(), self.value(b).shape());
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let xb = self.value(x);
        let bias = self.value(b);
        debug_assert_eq!(xb.shape().last(), bias.shape().last());
        let v = xb + bias;
        self.push(v, Op::AddBias(x, b))
    }

    /// Broadcast-add `p` (shape = x.shape()[1..]) over the leading axis.
    pub fn add_bcast0(&mut self, x: NodeId, p: NodeId) -> NodeId {
        debug_assert_eq!(&self.value(x).shape()[1..], self.value(p).shape());
        let v = self.value(x) + self.value(p);
        self.push(v, Op::AddBcast0(x, p))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, s: S) -> NodeId {
        let v = self.value(x).mapv(|e| e * s);
        self.push(v, Op::Scale(x, s))
    }

    /// `x` with any leading shape times a 2-d weight: `(.., K) x (K, N)`.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let xv = self.value(x);
        let wv = self.value(w);
        let k = *xv.shape().last().expect("x has a last axis");
        let (wk, n) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(k, wk, "linear: inner dims {k} vs {wk}");
        let m = xv.len() / k;
        let y = as2(xv, m, k).dot(&as2(wv, wk, n));
        let mut out_shape: Vec<usize> = xv.shape().to_vec();
        *out_shape.last_mut().unwrap() = n;
        let v = y.into_dyn().into_shape_with_order(IxDyn(&out_shape)).unwrap();
        self.push(v, Op::Linear(x, w))
    }

    /// Batched matmul `(B, M, K) x (B, K, N)`; with `trans_b`, `b` is
    /// `(B, N, K)` and used transposed.
    pub fn bmm(&mut self, a: NodeId, b: NodeId, trans_b: bool) -> NodeId {
        let av = self.value(a);
        let bv = self.value(b);
        assert_eq!(av.ndim(), 3, "bmm lhs must be 3-d");
        assert_eq!(bv.ndim(), 3, "bmm rhs must be 3-d");
        let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let n = if trans_b { bv.shape()[1] } else { bv.shape()[2] };
        debug_assert_eq!(bs, bv.shape()[0]);
        debug_assert_eq!(k, if trans_b { bv.shape()[2] } else { bv.shape()[1] });
        let mut out = ArrayD::zeros(IxDyn(&[bs, m, n]));
        for i in 0..bs {
            let ai = av.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
            let bi = bv.index_axis(Axis(0), i).into_dimensionality::<Ix2>().unwrap();
            let ci = if trans_b { ai.dot(&bi.t()) } else { ai.dot(&bi) };
            out.index_axis_mut(Axis(0), i).assign(&ci);
        }
        self.push(out, Op::Bmm { a, b, trans_b })
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let mut v = xv.clone();
        let last = v.ndim() - 1;
        for mut row in v.lanes_mut(Axis(last)) {
            let max = row.iter().fold(S::neg_infinity(), |m, &e| m.max(e));
            row.mapv_inplace(|e| (e - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|e| e / sum);
        }
        self.push(v, Op::Softmax(x))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|e| if e > S::zero() { e } else { S::zero() });
        self.push(v, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let one = S::one();
        let v = self.value(x).mapv(|e| one / (one + (-e).exp()));
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|e| e.tanh());
        self.push(v, Op::Tanh(x))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: S) -> NodeId {
        let xv = self.value(x);
        let g = self.value(gain);
        let b = self.value(bias);
        let last = xv.ndim() - 1;
        let d = S::from_f64(xv.shape()[last] as f64);
        let mut v = xv.clone();
        for mut row in v.lanes_mut(Axis(last)) {
            let mean = row.sum() / d;
            let var = row.iter().map(|&e| (e - mean) * (e - mean)).fold(S::zero(), |a, e| a + e) / d;
            let rstd = S::one() / (var + eps).sqrt();
            for (i, e) in row.iter_mut().enumerate() {
                *e = (*e - mean) * rstd * g[[i]] + b[[i]];
            }
        }
        self.push(v, Op::LayerNorm { x, gain, bias, eps })
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> NodeId {
        let views: Vec<ArrayViewD<S>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        self.push(v.as_standard_layout().to_owned(), Op::Concat { parts: parts.to_vec(), axis })
    }

    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> NodeId {
        let v = self
            .value(x)
            .slice_axis(Axis(axis), ndarray::Slice::from(start..start + len))
            .as_standard_layout()
            .to_owned();
        self.push(v, Op::Narrow { x, axis, start, len })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape preserves element count");
        self.push(v, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> NodeId {
        let v = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        self.push(v, Op::Permute { x, axes: axes.to_vec() })
    }

    /// Mean of `table` rows per group; empty groups produce zero rows.
    pub fn gather_mean_rows(&mut self, table: NodeId, groups: Vec<Vec<usize>>) -> NodeId {
        let t = self.value(table);
        let d = t.shape()[1];
        let mut out = ArrayD::zeros(IxDyn(&[groups.len(), d]));
        for (gi, group) in groups.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            let mut row = out.index_axis_mut(Axis(0), gi);
            for &r in group {
                row += &t.index_axis(Axis(0), r);
            }
            let inv = S::one() / S::from_f64(group.len() as f64);
            row.mapv_inplace(|e| e * inv);
        }
        self.push(out, Op::GatherMeanRows { table, groups })
    }

    /// Select rows along axis 0 (with repetition allowed).
    pub fn select_rows(&mut self, x: NodeId, idx: Vec<usize>) -> NodeId {
        let xv = self.value(x);
        let mut shape: Vec<usize> = xv.shape().to_vec();
        shape[0] = idx.len();
        let mut out = ArrayD::zeros(IxDyn(&shape));
        for (i, &r) in idx.iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(&xv.index_axis(Axis(0), r));
        }
        self.push(out, Op::SelectRows { x, idx })
    }

    /// Forward the discrete `hard` value; route gradients straight through
    /// to `soft`.
    pub fn straight_through(&mut self, soft: NodeId, hard: ArrayD<S>) -> NodeId {
        debug_assert_eq!(self.value(soft).shape(), hard.shape());
        self.push(hard, Op::StraightThrough { soft })
    }

    /// Weighted mean cross-entropy between a probability tensor `(.., C)`
    /// and a target distribution of the same shape. `weights` has the
    /// leading shape (all axes but the last); the loss is the weighted mean
    /// over leading positions of `-sum_c t_c ln(clamp(p_c))`.
    pub fn cross_entropy_mean(&mut self, probs: NodeId, target: ArrayD<S>, weights: ArrayD<S>) -> NodeId {
        let p = self.value(probs);
        debug_assert_eq!(p.shape(), target.shape());
        debug_assert_eq!(&p.shape()[..p.ndim() - 1], weights.shape());
        let eps = S::from_f64(1e-7);
        let total_w = weights.sum();
        let mut acc = S::zero();
        if total_w > S::zero() {
            let last = p.ndim() - 1;
            for ((pos, prow), trow) in p
                .lanes(Axis(last))
                .into_iter()
                .enumerate()
                .zip(target.lanes(Axis(last)))
            {
                let w = weights.as_slice().expect("weights contiguous")[pos];
                if w == S::zero() {
                    continue;
                }
                let mut ce = S::zero();
                for (&pc, &tc) in prow.iter().zip(trow.iter()) {
                    if tc != S::zero() {
                        ce -= tc * pc.max(eps).ln();
                    }
                }
                acc += w * ce;
            }
            acc /= total_w;
        }
        let v = ArrayD::from_elem(IxDyn(&[]), acc);
        self.push(v, Op::CrossEntropyMean { probs, target, weights })
    }

    /// Walks the tape in reverse from the seeded losses, accumulating
    /// parameter gradients into `store`. Gradient flow halts at `stops`
    /// (those nodes receive their gradient but do not propagate it) and a
    /// parameter is skipped when `param_filter` returns false for it.
    pub fn backward(
        &self,
        seeds: &[(NodeId, S)],
        stops: &HashSet<NodeId>,
        store: &mut ParamStore<S>,
        param_filter: Option<&dyn Fn(ParamId) -> bool>,
    ) {
        let mut grads: Vec<Option<ArrayD<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        for &(node, scale) in seeds {
            let seed = ArrayD::from_elem(self.nodes[node.0].value.raw_dim(), scale);
            accumulate(&mut grads[node.0], seed);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(gy) = grads[i].take() else { continue };
            if let Op::Param(pid) = self.nodes[i].op {
                if param_filter.map(|f| f(pid)).unwrap_or(true) {
                    store.get_mut(pid).grad += &gy;
                }
                continue;
            }
            if stops.contains(&NodeId(i)) {
                continue;
            }
            self.backprop_node(i, &gy, &mut grads);
        }
    }

    fn backprop_node(&self, i: usize, gy: &ArrayD<S>, grads: &mut [Option<ArrayD<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                accumulate(&mut grads[a.0], gy.clone());
                accumulate(&mut grads[b.0], gy.clone());
            }
            Op::AddBias(x, b) => {
                accumulate(&mut grads[x.0], gy.clone());
                let d = *gy.shape().last().unwrap();
                let m = gy.len() / d;
                let gb = as2(gy, m, d).sum_axis(Axis(0)).into_dyn();
                accumulate(&mut grads[b.0], gb);
            }
            Op::AddBcast0(x, p) => {
                accumulate(&mut grads[x.0], gy.clone());
                let gp = gy.sum_axis(Axis(0));
                accumulate(&mut grads[p.0], gp);
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads[a.0], gy.clone());
                accumulate(&mut grads[b.0], gy.mapv(|e| -e));
            }
            Op::Mul(a, b) => {
                accumulate(&mut grads[a.0], gy * self.value(*b));
                accumulate(&mut grads[b.0], gy * self.value(*a));
            }
            Op::Scale(x, s) => {
                accumulate(&mut grads[x.0], gy.mapv(|e| e * *s));
            }
            Op::Linear(x, w) => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let k = *xv.shape().last().unwrap();
                let n = wv.shape()[1];
                let m = xv.len() / k;
                let gy2 = as2(gy, m, n);
                let gx = gy2.dot(&as2(wv, k, n).t());
                let gw = as2(xv, m, k).t().dot(&gy2);
                accumulate(
                    &mut grads[x.0],
                    gx.into_dyn().into_shape_with_order(xv.raw_dim()).unwrap(),
                );
                accumulate(&mut grads[w.0], gw.into_dyn());
            }
            Op::Bmm { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let bs = av.shape()[0];
                let mut ga = ArrayD::zeros(av.raw_dim());
                let mut gb = ArrayD::zeros(bv.raw_dim());
                for bi in 0..bs {
                    let ai = av.index_axis(Axis(0), bi).into_dimensionality::<Ix2>().unwrap();
                    let bmat = bv.index_axis(Axis(0), bi).into_dimensionality::<Ix2>().unwrap();
                    let gyi = gy.index_axis(Axis(0), bi).into_dimensionality::<Ix2>().unwrap();
                    if *trans_b {
                        ga.index_axis_mut(Axis(0), bi).assign(&gyi.dot(&bmat));
                        gb.index_axis_mut(Axis(0), bi).assign(&gyi.t().dot(&ai));
                    } else {
                        ga.index_axis_mut(Axis(0), bi).assign(&gyi.dot(&bmat.t()));
                        gb.index_axis_mut(Axis(0), bi).assign(&ai.t().dot(&gyi));
                    }
                }
                accumulate(&mut grads[a.0], ga);
                accumulate(&mut grads[b.0], gb);
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let mut gx = gy * y;
                let last = y.ndim() - 1;
                for (mut gxrow, yrow) in gx.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last))) {
                    let dot = gxrow.sum();
                    for (g, &yv) in gxrow.iter_mut().zip(yrow.iter()) {
                        *g -= dot * yv;
                    }
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let gx = ndarray::Zip::from(gy).and(xv).map_collect(|&g, &v| {
                    if v > S::zero() {
                        g
                    } else {
                        S::zero()
                    }
                });
                accumulate(&mut grads[x.0], gx);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let gx = ndarray::Zip::from(gy).and(y).map_collect(|&g, &yv| g * yv * (S::one() - yv));
                accumulate(&mut grads[x.0], gx);
            }
            Op::Tanh(x) => {
                let y = &node.value;
                let gx = ndarray::Zip::from(gy).and(y).map_collect(|&g, &yv| g * (S::one() - yv * yv));
                accumulate(&mut grads[x.0], gx);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let xv = self.value(*x);
                let g = self.value(*gain);
                let last = xv.ndim() - 1;
                let d = S::from_f64(xv.shape()[last] as f64);
                let mut gx = ArrayD::zeros(xv.raw_dim());
                let mut ggain = ArrayD::zeros(g.raw_dim());
                let mut gbias = ArrayD::zeros(g.raw_dim());
                for ((xrow, gyrow), mut gxrow) in xv
                    .lanes(Axis(last))
                    .into_iter()
                    .zip(gy.lanes(Axis(last)))
                    .zip(gx.lanes_mut(Axis(last)))
                {
                    let mean = xrow.sum() / d;
                    let var =
                        xrow.iter().map(|&e| (e - mean) * (e - mean)).fold(S::zero(), |a, e| a + e) / d;
                    let rstd = S::one() / (var + *eps).sqrt();
                    // xhat_i = (x_i - mean) * rstd
                    let mut sum_dxhat = S::zero();
                    let mut sum_dxhat_xhat = S::zero();
                    for ((&xi, &gyi), i) in xrow.iter().zip(gyrow.iter()).zip(0..) {
                        let xhat = (xi - mean) * rstd;
                        let dxhat = gyi * g[[i]];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                        ggain[[i]] += gyi * xhat;
                        gbias[[i]] += gyi;
                    }
                    for ((&xi, &gyi), (i, gxi)) in
                        xrow.iter().zip(gyrow.iter()).zip(gxrow.iter_mut().enumerate())
                    {
                        let xhat = (xi - mean) * rstd;
                        let dxhat = gyi * g[[i]];
                        *gxi = rstd * (dxhat - sum_dxhat / d - xhat * sum_dxhat_xhat / d);
                    }
                }
                accumulate(&mut grads[x.0], gx);
                accumulate(&mut grads[gain.0], ggain);
                accumulate(&mut grads[bias.0], gbias);
            }
            Op::Concat { parts, axis } => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    let gp = gy
                        .slice_axis(Axis(*axis), ndarray::Slice::from(start..start + len))
                        .to_owned();
                    accumulate(&mut grads[p.0], gp);
                    start += len;
                }
            }
            Op::Narrow { x, axis, start, len } => {
                let xv = self.value(*x);
                let mut gx = ArrayD::zeros(xv.raw_dim());
                gx.slice_axis_mut(Axis(*axis), ndarray::Slice::from(*start..*start + *len))
                    .assign(gy);
                accumulate(&mut grads[x.0], gx);
            }
            Op::Reshape(x) => {
                let gx = gy
                    .clone()
                    .into_shape_with_order(self.value(*x).raw_dim())
                    .expect("reshape backward");
                accumulate(&mut grads[x.0], gx);
            }
            Op::Permute { x, axes } => {
                let mut inverse = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let gx = gy.view().permuted_axes(IxDyn(&inverse)).as_standard_layout().to_owned();
                accumulate(&mut grads[x.0], gx);
            }
            Op::GatherMeanRows { table, groups } => {
                let t = self.value(*table);
                let mut gt = ArrayD::zeros(t.raw_dim());
                for (gi, group) in groups.iter().enumerate() {
                    if group.is_empty() {
                        continue;
                    }
                    let inv = S::one() / S::from_f64(group.len() as f64);
                    let srow = gy.index_axis(Axis(0), gi);
                    for &r in group {
                        let mut drow = gt.index_axis_mut(Axis(0), r);
                        drow.zip_mut_with(&srow, |d, &s| *d += s * inv);
                    }
                }
                accumulate(&mut grads[table.0], gt);
            }
            Op::SelectRows { x, idx } => {
                let xv = self.value(*x);
                let mut gx = ArrayD::zeros(xv.raw_dim());
                for (i, &r) in idx.iter().enumerate() {
                    let mut drow = gx.index_axis_mut(Axis(0), r);
                    let srow = gy.index_axis(Axis(0), i);
                    drow.zip_mut_with(&srow, |d, &s| *d += s);
                }
                accumulate(&mut grads[x.0], gx);
            }
            Op::StraightThrough { soft } => {
                accumulate(&mut grads[soft.0], gy.clone());
            }
            Op::CrossEntropyMean { probs, target, weights } => {
                let p = self.value(*probs);
                let eps = S::from_f64(1e-7);
                let total_w = weights.sum();
                let mut gp = ArrayD::zeros(p.raw_dim());
                if total_w > S::zero() {
                    let seed = gy[[]];
                    let wslice = weights.as_slice().expect("weights contiguous");
                    let last = p.ndim() - 1;
                    for ((pos, mut gprow), (prow, trow)) in gp
                        .lanes_mut(Axis(last))
                        .into_iter()
                        .enumerate()
                        .zip(p.lanes(Axis(last)).into_iter().zip(target.lanes(Axis(last))))
                    {
                        let w = wslice[pos];
                        if w == S::zero() {
                            continue;
                        }
                        for ((g, &pc), &tc) in gprow.iter_mut().zip(prow.iter()).zip(trow.iter()) {
                            if tc != S::zero() {
                                *g = -seed * w * tc / pc.max(eps) / total_w;
                            }
                        }
                    }
                }
                accumulate(&mut grads[probs.0], gp);
            }
        }
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<ArrayD<S>>, g: ArrayD<S>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// Adam optimizer over a [`ParamStore`]. Non-trainable parameters are left
/// bit-identical (no moment update, no decay).
#[derive(Debug)]
pub struct Adam<S: Scalar> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    t: i32,
    m: Vec<ArrayD<S>>,
    v: Vec<ArrayD<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(lr: S, store: &ParamStore<S>) -> Self {
        let m = store.iter().map(|(_, p)| ArrayD::zeros(p.value.raw_dim())).collect();
        let v = store.iter().map(|(_, p)| ArrayD::zeros(p.value.raw_dim())).collect();
        Self {
            lr,
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            eps: S::from_f64(1e-8),
            t: 0,
            m,
            v,
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore<S>) {
        self.t += 1;
        let bc1 = S::one() - self.beta1.powi(self.t);
        let bc2 = S::one() - self.beta2.powi(self.t);
        for i in 0..store.len() {
            let p = store.get_mut(ParamId(i));
            if !p.trainable {
                p.grad.fill(S::zero());
                continue;
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut p.value)
                .and(m)
                .and(v)
                .and(&p.grad)
                .for_each(|w, m, v, &g| {
                    *m = self.beta1 * *m + (S::one() - self.beta1) * g;
                    *v = self.beta2 * *v + (S::one() - self.beta2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w = *w - self.lr * mhat / (vhat.sqrt() + self.eps);
                });
            p.grad.fill(S::zero());
        }
    }
}
