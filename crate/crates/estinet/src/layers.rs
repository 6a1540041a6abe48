//! Neural building blocks assembled from graph ops: parameter init, dense
//! layers, an LSTM encoder, a transformer encoder, selector heads, and
//! straight-through Gumbel-Softmax selection.

use ndarray::{ArrayD, Axis, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{Graph, NodeId, ParamId, ParamStore, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum LayersError {
    #[error("gumbel softmax temperature must be positive, got {0}")]
    Temperature(f64),
}

/// Xavier-uniform matrix.
pub fn init_xavier<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha8Rng,
    name: &str,
    rows: usize,
    cols: usize,
) -> ParamId {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let v = ArrayD::from_shape_fn(IxDyn(&[rows, cols]), |_| S::from_f64(rng.gen_range(-a..a)));
    store.add(name, v)
}

/// Small-uniform matrix (embedding tables).
pub fn init_uniform<S: Scalar>(
    store: &mut ParamStore<S>,
    rng: &mut ChaCha8Rng,
    name: &str,
    shape: &[usize],
    scale: f64,
) -> ParamId {
    let v = ArrayD::from_shape_fn(IxDyn(shape), |_| S::from_f64(rng.gen_range(-scale..scale)));
    store.add(name, v)
}

pub fn init_const<S: Scalar>(store: &mut ParamStore<S>, name: &str, shape: &[usize], value: f64) -> ParamId {
    store.add(name, ArrayD::from_elem(IxDyn(shape), S::from_f64(value)))
}

/// Fully connected layer.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        let w = init_xavier(store, rng, &format!("{name}.w"), d_in, d_out);
        let b = init_const(store, &format!("{name}.b"), &[d_out], 0.0);
        Self { w, b }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: NodeId) -> NodeId {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.linear(x, w);
        g.add_bias(y, b)
    }
}

/// Single-layer LSTM; the query encoding is the last hidden state.
#[derive(Debug, Clone)]
pub struct Lstm {
    fused: Dense,
    d_hidden: usize,
}

impl Lstm {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_in: usize,
        d_hidden: usize,
    ) -> Self {
        let fused = Dense::new(store, rng, name, d_in + d_hidden, 4 * d_hidden);
        // forget-gate bias starts open
        {
            let b = store.get_mut(fused.b);
            for i in d_hidden..2 * d_hidden {
                b.value[[i]] = S::one();
            }
        }
        Self { fused, d_hidden }
    }

    /// Runs over `x` of shape (B, T, D) and returns the hidden state at each
    /// sample's last real token (`lengths[i] - 1`), shape (B, H).
    pub fn last_hidden<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: NodeId,
        lengths: &[usize],
    ) -> NodeId {
        let shape = g.value(x).shape().to_vec();
        let (batch, steps, d_in) = (shape[0], shape[1], shape[2]);
        debug_assert_eq!(batch, lengths.len());
        let h0 = g.constant(ArrayD::zeros(IxDyn(&[batch, self.d_hidden])));
        let c0 = g.constant(ArrayD::zeros(IxDyn(&[batch, self.d_hidden])));
        let (mut h, mut c) = (h0, c0);
        let mut per_step = Vec::with_capacity(steps);
        for t in 0..steps {
            let x_t = g.narrow(x, 1, t, 1);
            let x_t = g.reshape(x_t, &[batch, d_in]);
            let cat = g.concat(&[x_t, h], 1);
            let gates = self.fused.forward(g, store, cat);
            let i_gate = g.narrow(gates, 1, 0, self.d_hidden);
            let i_gate = g.sigmoid(i_gate);
            let f_gate = g.narrow(gates, 1, self.d_hidden, self.d_hidden);
            let f_gate = g.sigmoid(f_gate);
            let g_gate = g.narrow(gates, 1, 2 * self.d_hidden, self.d_hidden);
            let g_gate = g.tanh(g_gate);
            let o_gate = g.narrow(gates, 1, 3 * self.d_hidden, self.d_hidden);
            let o_gate = g.sigmoid(o_gate);
            let fc = g.mul(f_gate, c);
            let ig = g.mul(i_gate, g_gate);
            c = g.add(fc, ig);
            let tc = g.tanh(c);
            h = g.mul(o_gate, tc);
            let h_row = g.reshape(h, &[1, batch, self.d_hidden]);
            per_step.push(h_row);
        }
        let stacked = g.concat(&per_step, 0); // (T, B, H)
        let flat = g.reshape(stacked, &[steps * batch, self.d_hidden]);
        let idx: Vec<usize> = lengths
            .iter()
            .enumerate()
            .map(|(b, &len)| {
                debug_assert!(len >= 1 && len <= steps);
                (len - 1) * batch + b
            })
            .collect();
        g.select_rows(flat, idx)
    }
}

/// One transformer encoder block: multi-head self-attention and a two-layer
/// feed-forward, each wrapped in residual + layer norm.
#[derive(Debug, Clone)]
pub struct EncoderLayer {
    wq: Dense,
    wk: Dense,
    wv: Dense,
    wo: Dense,
    ff1: Dense,
    ff2: Dense,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
    heads: usize,
}

impl EncoderLayer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by heads {heads}");
        Self {
            wq: Dense::new(store, rng, &format!("{name}.attn.wq"), dim, dim),
            wk: Dense::new(store, rng, &format!("{name}.attn.wk"), dim, dim),
            wv: Dense::new(store, rng, &format!("{name}.attn.wv"), dim, dim),
            wo: Dense::new(store, rng, &format!("{name}.attn.wo"), dim, dim),
            ff1: Dense::new(store, rng, &format!("{name}.ff.l1"), dim, d_ff),
            ff2: Dense::new(store, rng, &format!("{name}.ff.l2"), d_ff, dim),
            ln1_gain: init_const(store, &format!("{name}.ln1.gain"), &[dim], 1.0),
            ln1_bias: init_const(store, &format!("{name}.ln1.bias"), &[dim], 0.0),
            ln2_gain: init_const(store, &format!("{name}.ln2.gain"), &[dim], 1.0),
            ln2_bias: init_const(store, &format!("{name}.ln2.bias"), &[dim], 0.0),
            heads: heads,
        }
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: NodeId) -> NodeId {
        let shape = g.value(x).shape().to_vec();
        let (batch, len, dim) = (shape[0], shape[1], shape[2]);
        let dh = dim / self.heads;

        let split = |g: &mut Graph<S>, t: NodeId| {
            let t = g.reshape(t, &[batch, len, self.heads, dh]);
            let t = g.permute(t, &[0, 2, 1, 3]);
            g.reshape(t, &[batch * self.heads, len, dh])
        };
        let q = self.wq.forward(g, store, x);
        let q = split(g, q);
        let k = self.wk.forward(g, store, x);
        let k = split(g, k);
        let v = self.wv.forward(g, store, x);
        let v = split(g, v);

        let scores = g.bmm(q, k, true);
        let scores = g.scale(scores, S::from_f64(1.0 / (dh as f64).sqrt()));
        let attn = g.softmax(scores);
        let ctx = g.bmm(attn, v, false);
        let ctx = g.reshape(ctx, &[batch, self.heads, len, dh]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[batch, len, dim]);
        let attn_out = self.wo.forward(g, store, ctx);

        let res1 = g.add(x, attn_out);
        let ln1_g = g.param(store, self.ln1_gain);
        let ln1_b = g.param(store, self.ln1_bias);
        let norm1 = g.layer_norm(res1, ln1_g, ln1_b, S::from_f64(1e-5));

        let ff = self.ff1.forward(g, store, norm1);
        let ff = g.relu(ff);
        let ff = self.ff2.forward(g, store, ff);
        let res2 = g.add(norm1, ff);
        let ln2_g = g.param(store, self.ln2_gain);
        let ln2_b = g.param(store, self.ln2_bias);
        g.layer_norm(res2, ln2_g, ln2_b, S::from_f64(1e-5))
    }
}

/// Stack of encoder blocks plus a per-position linear head producing
/// two-way logits (row selected / not selected).
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    layers: Vec<EncoderLayer>,
    out: Dense,
}

impl TransformerEncoder {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        n_layers: usize,
        heads: usize,
        d_ff: usize,
    ) -> Self {
        let layers = (0..n_layers)
            .map(|i| EncoderLayer::new(store, rng, &format!("{name}.l{i}"), dim, heads, d_ff))
            .collect();
        let out = Dense::new(store, rng, &format!("{name}.out"), dim, 2);
        Self { layers, out }
    }

    /// (B, L, D) -> per-position two-way logits (B, L, 2).
    pub fn logits<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: NodeId) -> NodeId {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, store, h);
        }
        self.out.forward(g, store, h)
    }
}

/// Selector head: projects the query encoding into class-embedding space and
/// scores it against a sample-dependent class matrix.
#[derive(Debug, Clone)]
pub struct SelectorHead {
    proj: Dense,
}

impl SelectorHead {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        d_rnn: usize,
        d_class: usize,
    ) -> Self {
        Self { proj: Dense::new(store, rng, name, d_rnn, d_class) }
    }

    /// `q` (B, d_rnn) against `classes` (B, c, d_class) -> logits (B, c).
    pub fn logits<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        q: NodeId,
        classes: NodeId,
    ) -> NodeId {
        let key = self.proj.forward(g, store, q);
        let shape = g.value(key).shape().to_vec();
        let (batch, d_class) = (shape[0], shape[1]);
        let key = g.reshape(key, &[batch, d_class, 1]);
        let beta = g.bmm(classes, key, false);
        let classes_n = g.value(beta).shape()[1];
        g.reshape(beta, &[batch, classes_n])
    }

    /// Same scoring against one class matrix shared by the whole batch,
    /// stored as a `(d_class, c)` parameter (learned class embeddings).
    pub fn logits_shared<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        q: NodeId,
        classes: NodeId,
    ) -> NodeId {
        let key = self.proj.forward(g, store, q);
        g.linear(key, classes)
    }
}

/// Noise source for Gumbel-Softmax sampling. `Zero` makes sampling a
/// deterministic argmax of the logits.
pub enum Noise<'a> {
    Zero,
    Gumbel(&'a mut ChaCha8Rng),
}

impl Noise<'_> {
    fn sample<S: Scalar>(&mut self, shape: &[usize]) -> Option<ArrayD<S>> {
        match self {
            Noise::Zero => None,
            Noise::Gumbel(rng) => Some(ArrayD::from_shape_fn(IxDyn(shape), |_| {
                let u: f64 = rng.gen_range(1e-12..1.0);
                S::from_f64(-(-u.ln()).ln())
            })),
        }
    }
}

/// Soft sample plus (optionally) the straight-through hard sample and the
/// selected index per lane.
pub struct GumbelOut {
    pub soft: NodeId,
    pub hard: Option<NodeId>,
    pub hard_indices: Vec<usize>,
}

/// `softmax((logits + gumbel_noise) / tau)` over the last axis; the hard
/// variant additionally returns a one-hot straight-through sample whose
/// backward path is the soft sample's.
pub fn gumbel_softmax<S: Scalar>(
    g: &mut Graph<S>,
    logits: NodeId,
    tau: f64,
    hard: bool,
    noise: &mut Noise,
) -> Result<GumbelOut, LayersError> {
    if tau <= 0.0 {
        return Err(LayersError::Temperature(tau));
    }
    let shape = g.value(logits).shape().to_vec();
    let noisy = match noise.sample::<S>(&shape) {
        Some(n) => {
            let n = g.constant(n);
            g.add(logits, n)
        }
        None => logits,
    };
    let scaled = g.scale(noisy, S::from_f64(1.0 / tau));
    let soft = g.softmax(scaled);
    if !hard {
        return Ok(GumbelOut { soft, hard: None, hard_indices: Vec::new() });
    }
    let (onehot, hard_indices) = argmax_onehot(g.value(soft));
    let st = g.straight_through(soft, onehot);
    Ok(GumbelOut { soft, hard: Some(st), hard_indices })
}

/// One-hot of the last-axis argmax, plus the flat list of selected indices
/// (one per leading position).
pub fn argmax_onehot<S: Scalar>(probs: &ArrayD<S>) -> (ArrayD<S>, Vec<usize>) {
    let last = probs.ndim() - 1;
    let mut onehot = ArrayD::zeros(probs.raw_dim());
    let mut indices = Vec::new();
    for (prow, mut orow) in probs
        .lanes(Axis(last))
        .into_iter()
        .zip(onehot.lanes_mut(Axis(last)))
    {
        let mut best = 0;
        for (i, &v) in prow.iter().enumerate() {
            if v > prow[best] {
                best = i;
            }
        }
        orow[best] = S::one();
        indices.push(best);
    }
    (onehot, indices)
}
