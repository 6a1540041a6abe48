//! The full network: input representation (words, numbers, queries, tables),
//! three selector heads with soft/hard Gumbel-Softmax selection, and one
//! estimator sublayer per logic op, assembled into a differentiable forward
//! pass.
//!
//! Forward modes:
//!
//! - **Soft selection** (training task path): every selection is a
//!   probability-weighted mixture — column and argument mixtures feed the
//!   estimator bank, and the op selection mixes the per-op output
//!   distributions.
//! - **Hard selection** (evaluation, and the online-label branch during
//!   training): straight-through one-hot selections; only the selected
//!   estimator runs, routed per sample.
//! - **External** (inference): hard selections are adapted to concrete API
//!   calls and the applications answer; no estimator runs.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{encode_nan, encode_number, CodecConfig};
use crate::data::{is_numeric_token, LwpSample, QaSample, Table, TaskKind, Vocabulary, PAD_ID};
use crate::graph::{Graph, NodeId, ParamId, ParamStore, Scalar};
use crate::layers::{
    argmax_onehot, gumbel_softmax, init_uniform, Lstm, Noise, SelectorHead, TransformerEncoder,
};
use crate::oracle::{
    adapt_lwp_selection, adapt_selection_to_api, execute, AdaptedCall, HardSelections, LogicOp,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config error: {0}")]
    Config(String),
    #[error("external mode requires hard selection")]
    ExternalNeedsHard,
    #[error("checkpoint error at {path}: {message}")]
    Checkpoint { path: String, message: String },
}

/// Estimator sublayer shape: encoder depth, attention heads, feed-forward
/// width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstiLayerConfig {
    pub n_layers: usize,
    pub k_heads: usize,
    pub d_ff: usize,
}

impl Default for EstiLayerConfig {
    fn default() -> Self {
        Self { n_layers: 2, k_heads: 4, d_ff: 512 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstiNetConfig {
    pub task: TaskKind,
    /// Shared embedding dimension for words and numbers.
    pub dim: usize,
    pub d_rnn: usize,
    pub codec: CodecConfig,
    pub esti: EstiLayerConfig,
    /// Gumbel-Softmax temperature for hard selection sampling.
    pub tau: f64,
    pub max_question_len: usize,
    /// Multiplier bringing `{0,1}` codec vectors to word-embedding
    /// magnitude; applied at every codec surface (question tokens, table
    /// cells, estimator inputs).
    pub embed_scale: f64,
}

impl EstiNetConfig {
    pub fn new(task: TaskKind) -> Self {
        Self {
            task,
            dim: 128,
            d_rnn: 128,
            codec: CodecConfig::default(),
            esti: EstiLayerConfig::default(),
            tau: 1.0,
            max_question_len: 24,
            embed_scale: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.codec.dim != self.dim {
            return Err(ModelError::Config(format!(
                "codec dim {} must equal embedding dim {} (shared space)",
                self.codec.dim, self.dim
            )));
        }
        if self.dim % self.esti.k_heads != 0 {
            return Err(ModelError::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.esti.k_heads
            )));
        }
        if self.tau <= 0.0 {
            return Err(ModelError::Config(format!("tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// One estimator: a transformer encoder over `[argument] ++ column cells`
/// with learned slot embeddings marking which position is the argument, and
/// a per-position two-way head.
#[derive(Debug, Clone)]
pub struct EstiLayer {
    enc: TransformerEncoder,
    arg_slot: ParamId,
    cell_slot: ParamId,
}

impl EstiLayer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        rng: &mut ChaCha8Rng,
        name: &str,
        dim: usize,
        cfg: &EstiLayerConfig,
    ) -> Self {
        let enc = TransformerEncoder::new(store, rng, name, dim, cfg.n_layers, cfg.k_heads, cfg.d_ff);
        let arg_slot = init_uniform(store, rng, &format!("{name}.slot.arg"), &[1, dim], 0.5);
        let cell_slot = init_uniform(store, rng, &format!("{name}.slot.cell"), &[1, dim], 0.5);
        Self { enc, arg_slot, cell_slot }
    }

    /// `z` (B, rows+1, D) with the argument at position 0 -> per-row binary
    /// distribution (B, rows, 2). The argument position is dropped from the
    /// output.
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, z: NodeId) -> NodeId {
        let rows = g.value(z).shape()[1] - 1;
        let a = g.param(store, self.arg_slot);
        let c = g.param(store, self.cell_slot);
        let c_rows = g.select_rows(c, vec![0; rows]);
        let slots = g.concat(&[a, c_rows], 0);
        let z = g.add_bcast0(z, slots);
        let logits = self.enc.logits(g, store, z);
        let out = g.narrow(logits, 1, 1, rows);
        g.softmax(out)
    }
}

/// Selection mode of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    Soft,
    Hard,
}

/// What answers the selected call: the estimator bank or the external
/// applications.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstiMode {
    Layers,
    External,
}

/// Per-head soft distributions (graph nodes, shape (B, classes)).
#[derive(Debug, Clone, Copy)]
pub struct Alphas {
    pub op: NodeId,
    pub col: NodeId,
    pub arg: NodeId,
}

/// The hard-selection branch of a forward pass.
pub struct HardBranch {
    pub selections: Vec<HardSelections>,
    /// Estimator output on `z_hard` (absent in external mode).
    pub probs: Option<NodeId>,
    /// Adapted API calls (with violation flags) for every sample.
    pub adapted: Vec<AdaptedCall>,
    /// Estimator input `[arg] ++ cells`, (B, rows+1, D).
    pub z_hard: NodeId,
}

/// Result of one forward pass.
pub struct Forward {
    pub batch_size: usize,
    pub rows: usize,
    /// Task-path per-row distribution (B, rows, 2).
    pub row_probs: NodeId,
    pub alphas: Alphas,
    pub hard: Option<HardBranch>,
    /// Nodes where online-loss gradients must stop: the soft estimator
    /// inputs, the soft op mixture weights, and the hard estimator input.
    pub online_stops: Vec<NodeId>,
}

/// Forward-pass options.
pub struct ForwardOptions<'r> {
    pub selection: SelectionMode,
    pub esti_mode: EstiMode,
    /// Build the hard branch even in soft mode (training's online branch).
    pub hard_branch: bool,
    /// Gumbel noise for hard sampling; `None` = deterministic argmax.
    pub noise: Option<&'r mut ChaCha8Rng>,
    /// Pin the selections instead of sampling (diagnostics, gold replay,
    /// mixture-consistency checks).
    pub forced: Option<&'r [HardSelections]>,
}

impl ForwardOptions<'_> {
    pub fn eval(esti_mode: EstiMode) -> Self {
        ForwardOptions {
            selection: SelectionMode::Hard,
            esti_mode,
            hard_branch: false,
            noise: None,
            forced: None,
        }
    }
}

/// Precomputed per-table tensors and piece groups.
pub struct CachedTable<S: Scalar> {
    pub table: Table,
    /// (n_value_cols, rows, D) codec embeddings of the numeric cells.
    numeric: ArrayD<S>,
    /// Piece groups per row of the entity column.
    entity_groups: Vec<Vec<usize>>,
    /// Piece groups per column name (index 0 = entity column).
    colname_groups: Vec<Vec<usize>>,
}

pub struct TableCache<S: Scalar> {
    tables: HashMap<u32, CachedTable<S>>,
    pub rows: usize,
    pub cols: usize,
}

impl<S: Scalar> TableCache<S> {
    pub fn get(&self, id: u32) -> &CachedTable<S> {
        self.tables.get(&id).expect("table id present in cache")
    }
}

/// Batch input: table-QA samples with their table cache, or comparison
/// samples.
pub enum BatchInput<'a, S: Scalar> {
    Taq { samples: &'a [&'a QaSample], cache: &'a TableCache<S> },
    Lwp { samples: &'a [&'a LwpSample] },
}

impl<S: Scalar> BatchInput<'_, S> {
    pub fn len(&self) -> usize {
        match self {
            BatchInput::Taq { samples, .. } => samples.len(),
            BatchInput::Lwp { samples } => samples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self, i: usize) -> &[String] {
        match self {
            BatchInput::Taq { samples, .. } => &samples[i].question_tokens,
            BatchInput::Lwp { samples } => &samples[i].question_tokens,
        }
    }
}

/// The assembled model: parameters plus the wiring to run them.
pub struct EstiNet<S: Scalar> {
    pub cfg: EstiNetConfig,
    pub vocab: Vocabulary,
    pub ops: Vec<LogicOp>,
    pub params: ParamStore<S>,
    emb: ParamId,
    pos: ParamId,
    lstm: Lstm,
    sel_op: SelectorHead,
    sel_col: SelectorHead,
    sel_arg: SelectorHead,
    /// Learned op class embeddings, stored (d, n_ops) for the shared head.
    op_classes: ParamId,
    esti: Vec<EstiLayer>,
}

impl<S: Scalar> EstiNet<S> {
    pub fn new(cfg: EstiNetConfig, vocab: Vocabulary, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let ops: Vec<LogicOp> = cfg.task.ops().to_vec();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0e57_1e37);
        let emb = init_uniform(&mut store, &mut rng, "emb.pieces", &[vocab.len(), cfg.dim], 0.1);
        let pos = init_uniform(&mut store, &mut rng, "emb.pos", &[cfg.max_question_len, cfg.dim], 0.1);
        let lstm = Lstm::new(&mut store, &mut rng, "query.lstm", cfg.dim, cfg.d_rnn);
        let sel_op = SelectorHead::new(&mut store, &mut rng, "sel.op.proj", cfg.d_rnn, cfg.dim);
        let sel_col = SelectorHead::new(&mut store, &mut rng, "sel.col.proj", cfg.d_rnn, cfg.dim);
        let sel_arg = SelectorHead::new(&mut store, &mut rng, "sel.arg.proj", cfg.d_rnn, cfg.dim);
        let op_classes =
            init_uniform(&mut store, &mut rng, "sel.op.classes", &[cfg.dim, ops.len()], 0.1);
        let esti = ops
            .iter()
            .map(|op| EstiLayer::new(&mut store, &mut rng, &format!("esti.{}", op.name()), cfg.dim, &cfg.esti))
            .collect();
        Ok(Self { cfg, vocab, ops, params: store, emb, pos, lstm, sel_op, sel_col, sel_arg, op_classes, esti })
    }

    pub fn op_index(&self, op: LogicOp) -> usize {
        self.ops.iter().position(|&o| o == op).expect("op in registry")
    }

    pub fn estilayer(&self, op: LogicOp) -> &EstiLayer {
        &self.esti[self.op_index(op)]
    }

    /// Piece-id groups for a token: vocabulary pieces for words, empty for
    /// numeric tokens (they are routed through the codec overlay).
    fn token_group(&self, token: &str) -> Vec<usize> {
        if is_numeric_token(token) {
            Vec::new()
        } else {
            vec![self.vocab.id(token)]
        }
    }

    fn word_groups(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.vocab.id(w)).collect()
    }

    /// Precomputes per-table tensors against this model's codec and
    /// vocabulary.
    pub fn build_table_cache(&self, tables: &[Table]) -> TableCache<S> {
        let rows = tables.first().map(|t| t.n_rows()).unwrap_or(0);
        let cols = tables.first().map(|t| t.n_cols()).unwrap_or(0);
        let mut map = HashMap::new();
        for table in tables {
            assert_eq!(table.n_rows(), rows, "all tables in a dataset share the row count");
            assert_eq!(table.n_cols(), cols, "all tables in a dataset share the column count");
            let n_value = cols - 1;
            let mut numeric = ArrayD::zeros(IxDyn(&[n_value, rows, self.cfg.dim]));
            for (c, col) in table.value_columns.iter().enumerate() {
                for (r, &v) in col.iter().enumerate() {
                    for (j, &bit) in encode_number(v, &self.cfg.codec).as_slice().iter().enumerate() {
                        numeric[[c, r, j]] = S::from_f64(bit as f64 * self.cfg.embed_scale);
                    }
                }
            }
            let entity_groups = table.name_column.iter().map(|n| self.word_groups(n)).collect();
            let colname_groups = table.column_names.iter().map(|n| self.word_groups(n)).collect();
            map.insert(
                table.id,
                CachedTable { table: table.clone(), numeric, entity_groups, colname_groups },
            );
        }
        TableCache { tables: map, rows, cols }
    }

    /// The number of indicator rows the task answers with.
    pub fn rows_for(&self, input: &BatchInput<S>) -> usize {
        match input {
            BatchInput::Taq { cache, .. } => cache.rows,
            BatchInput::Lwp { .. } => 1,
        }
    }

    /// Runs the network on a batch. See module docs for the modes.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        input: &BatchInput<S>,
        opts: ForwardOptions,
    ) -> Result<Forward, ModelError> {
        if opts.esti_mode == EstiMode::External && opts.selection == SelectionMode::Soft {
            return Err(ModelError::ExternalNeedsHard);
        }
        let batch = input.len();
        assert!(batch > 0, "empty batch");
        let rows = self.rows_for(input);
        let dim = self.cfg.dim;
        let store = &self.params;

        // ---- token embeddings ----
        let max_len = (0..batch).map(|i| input.tokens(i).len()).max().unwrap();
        assert!(
            max_len <= self.cfg.max_question_len,
            "question length {max_len} exceeds configured max {}",
            self.cfg.max_question_len
        );
        let lengths: Vec<usize> = (0..batch).map(|i| input.tokens(i).len()).collect();
        let mut token_groups: Vec<Vec<usize>> = Vec::with_capacity(batch * max_len);
        let mut overlay = ArrayD::zeros(IxDyn(&[batch, max_len, dim]));
        let mut sel_mask = ArrayD::zeros(IxDyn(&[batch, max_len]));
        for b in 0..batch {
            let tokens = input.tokens(b);
            for l in 0..max_len {
                match tokens.get(l) {
                    Some(tok) => {
                        if is_numeric_token(tok) {
                            let value: f32 = tok.parse().unwrap();
                            for (j, &bit) in encode_number(value, &self.cfg.codec).as_slice().iter().enumerate()
                            {
                                overlay[[b, l, j]] = S::from_f64(bit as f64 * self.cfg.embed_scale);
                            }
                            token_groups.push(Vec::new());
                        } else {
                            token_groups.push(self.token_group(tok));
                        }
                    }
                    None => {
                        token_groups.push(vec![PAD_ID]);
                        sel_mask[[b, l]] = S::from_f64(-1e9);
                    }
                }
            }
        }
        let emb_node = g.param(store, self.emb);
        let gathered = g.gather_mean_rows(emb_node, token_groups);
        let gathered = g.reshape(gathered, &[batch, max_len, dim]);
        let overlay_node = g.constant(overlay);
        // pure content embeddings (words averaged from pieces, numbers from
        // the codec) — these feed the query encoder and the estimator inputs
        let tok_embed = g.add(gathered, overlay_node);
        // position-tagged variant used as selector class matrix
        let pos_node = g.param(store, self.pos);
        let pos_cut = g.narrow(pos_node, 0, 0, max_len);
        let tok_keys = g.add_bcast0(tok_embed, pos_cut);

        // ---- query encoding ----
        let q = self.lstm.last_hidden(g, store, tok_embed, &lengths);

        // ---- selector logits ----
        let op_classes = g.param(store, self.op_classes);
        let beta_op = self.sel_op.logits_shared(g, store, q, op_classes);
        let mask_node = g.constant(sel_mask);
        let beta_arg = {
            let b = self.sel_arg.logits(g, store, q, tok_keys);
            g.add(b, mask_node)
        };
        // column candidates: table columns for TAQ, question tokens for LWP
        let (beta_col, col_stack) = match input {
            BatchInput::Taq { samples, cache } => {
                let n_cols = cache.cols;
                let mut colname_groups = Vec::with_capacity(batch * n_cols);
                let mut entity_groups = Vec::with_capacity(batch * rows);
                let mut numeric = ArrayD::zeros(IxDyn(&[batch, n_cols - 1, rows, dim]));
                for (b, s) in samples.iter().enumerate() {
                    let ct = cache.get(s.table_id);
                    colname_groups.extend(ct.colname_groups.iter().cloned());
                    entity_groups.extend(ct.entity_groups.iter().cloned());
                    numeric
                        .index_axis_mut(ndarray::Axis(0), b)
                        .assign(&ct.numeric.view());
                }
                let colnames = g.gather_mean_rows(emb_node, colname_groups);
                let colnames = g.reshape(colnames, &[batch, n_cols, dim]);
                let beta_col = self.sel_col.logits(g, store, q, colnames);
                // column sequences: entity column embeddings then numeric
                let entities = g.gather_mean_rows(emb_node, entity_groups);
                let entities = g.reshape(entities, &[batch, 1, rows * dim]);
                let numeric_node = g.constant(numeric);
                let numeric_node = g.reshape(numeric_node, &[batch, n_cols - 1, rows * dim]);
                let stack = g.concat(&[entities, numeric_node], 1); // (B, n_cols, rows*D)
                (beta_col, stack)
            }
            BatchInput::Lwp { .. } => {
                let b = self.sel_col.logits(g, store, q, tok_keys);
                let beta_col = g.add(b, mask_node);
                // every token is a candidate length-1 column
                let stack = g.reshape(tok_embed, &[batch, max_len, dim]); // rows*D = D
                (beta_col, stack)
            }
        };

        // ---- soft distributions (no noise) ----
        let alpha_op = g.softmax(beta_op);
        let alpha_col = g.softmax(beta_col);
        let alpha_arg = g.softmax(beta_arg);
        let alphas = Alphas { op: alpha_op, col: alpha_col, arg: alpha_arg };

        // ---- hard selections ----
        let need_hard =
            opts.selection == SelectionMode::Hard || opts.hard_branch || opts.forced.is_some();
        let mut noise_src = match opts.noise {
            Some(rng) => Noise::Gumbel(rng),
            None => Noise::Zero,
        };
        let hard_data = if need_hard {
            let (op_hot, op_idx) = self.sample_hard(g, beta_op, Sel::Op, opts.forced, &mut noise_src);
            let (col_hot, col_idx) = self.sample_hard(g, beta_col, Sel::Col, opts.forced, &mut noise_src);
            let (arg_hot, arg_idx) = self.sample_hard(g, beta_arg, Sel::Arg, opts.forced, &mut noise_src);
            let selections: Vec<HardSelections> = (0..batch)
                .map(|i| HardSelections { op: op_idx[i], column: col_idx[i], argument: arg_idx[i] })
                .collect();
            Some((op_hot, col_hot, arg_hot, selections))
        } else {
            None
        };

        // ---- soft task path ----
        // Forced selections pin the mixture weights to straight-through
        // one-hots, which must collapse the mixtures to hard routing
        // bit-exactly.
        let mut online_stops = Vec::new();
        let soft_probs = if opts.selection == SelectionMode::Soft {
            let (w_op, w_col, w_arg) = if opts.forced.is_some() {
                let (op_hot, col_hot, arg_hot, _) = hard_data.as_ref().expect("forced implies hard");
                (*op_hot, *col_hot, *arg_hot)
            } else {
                (alpha_op, alpha_col, alpha_arg)
            };
            let z_soft = self.assemble_z(g, w_col, w_arg, col_stack, tok_embed, batch, rows, dim);
            online_stops.push(z_soft);
            online_stops.push(w_op);
            let mut per_op = Vec::with_capacity(self.ops.len());
            for layer in &self.esti {
                let p = layer.forward(g, store, z_soft);
                per_op.push(g.reshape(p, &[batch, 1, rows * 2]));
            }
            let stacked = g.concat(&per_op, 1); // (B, n_ops, rows*2)
            let w = g.reshape(w_op, &[batch, 1, self.ops.len()]);
            let mixed = g.bmm(w, stacked, false);
            Some(g.reshape(mixed, &[batch, rows, 2]))
        } else {
            None
        };

        // ---- hard branch ----
        let hard = if let Some((_, col_hot, arg_hot, selections)) = hard_data {
            let z_hard = self.assemble_z(g, col_hot, arg_hot, col_stack, tok_embed, batch, rows, dim);
            online_stops.push(z_hard);
            let adapted: Vec<AdaptedCall> = (0..batch)
                .map(|i| match input {
                    BatchInput::Taq { samples, cache } => adapt_selection_to_api(
                        &selections[i],
                        &self.ops,
                        input.tokens(i),
                        &cache.get(samples[i].table_id).table,
                    ),
                    BatchInput::Lwp { .. } => {
                        adapt_lwp_selection(&selections[i], &self.ops, input.tokens(i))
                    }
                })
                .collect();
            let probs = match opts.esti_mode {
                EstiMode::Layers => {
                    // group samples by selected op, run each estimator once,
                    // then restore batch order
                    let mut by_op: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
                    for (i, sel) in selections.iter().enumerate() {
                        by_op.entry(sel.op).or_default().push(i);
                    }
                    let mut parts = Vec::new();
                    let mut order = Vec::new();
                    for (&op, idx) in &by_op {
                        let zi = g.select_rows(z_hard, idx.clone());
                        parts.push(self.esti[op].forward(g, store, zi));
                        order.extend(idx.iter().copied());
                    }
                    let cat = g.concat(&parts, 0);
                    let mut inverse = vec![0usize; batch];
                    for (pos, &orig) in order.iter().enumerate() {
                        inverse[orig] = pos;
                    }
                    Some(g.select_rows(cat, inverse))
                }
                EstiMode::External => None,
            };
            Some(HardBranch { selections, probs, adapted, z_hard })
        } else {
            None
        };

        // ---- task output ----
        let row_probs = match (opts.selection, opts.esti_mode) {
            (SelectionMode::Soft, _) => soft_probs.unwrap(),
            (SelectionMode::Hard, EstiMode::Layers) => {
                hard.as_ref().unwrap().probs.expect("hard estimator output")
            }
            (SelectionMode::Hard, EstiMode::External) => {
                let branch = hard.as_ref().unwrap();
                let mut probs = ArrayD::zeros(IxDyn(&[batch, rows, 2]));
                for (i, call) in branch.adapted.iter().enumerate() {
                    let response = execute(&call.call);
                    for (r, &on) in response.indicator.iter().enumerate() {
                        probs[[i, r, if on { 1 } else { 0 }]] = S::one();
                    }
                }
                g.constant(probs)
            }
        };

        Ok(Forward { batch_size: batch, rows, row_probs, alphas, hard, online_stops })
    }

    /// Weighted mixture of candidate sequences plus the argument mixture,
    /// concatenated into the estimator input `[arg] ++ cells`.
    #[allow(clippy::too_many_arguments)]
    fn assemble_z(
        &self,
        g: &mut Graph<S>,
        col_weights: NodeId,
        arg_weights: NodeId,
        col_stack: NodeId,
        tok_embed: NodeId,
        batch: usize,
        rows: usize,
        dim: usize,
    ) -> NodeId {
        let n_candidates = g.value(col_weights).shape()[1];
        let cw = g.reshape(col_weights, &[batch, 1, n_candidates]);
        let col_mix = g.bmm(cw, col_stack, false); // (B, 1, rows*D)
        let col_mix = g.reshape(col_mix, &[batch, rows, dim]);
        let n_tokens = g.value(arg_weights).shape()[1];
        let aw = g.reshape(arg_weights, &[batch, 1, n_tokens]);
        let arg_mix = g.bmm(aw, tok_embed, false); // (B, 1, D)
        g.concat(&[arg_mix, col_mix], 1)
    }

    fn sample_hard(
        &self,
        g: &mut Graph<S>,
        beta: NodeId,
        which: Sel,
        forced: Option<&[HardSelections]>,
        noise: &mut Noise,
    ) -> (NodeId, Vec<usize>) {
        if let Some(forced) = forced {
            let shape = g.value(beta).shape().to_vec();
            let mut onehot = ArrayD::zeros(IxDyn(&shape));
            let mut idx = Vec::with_capacity(shape[0]);
            for (b, sel) in forced.iter().enumerate() {
                let i = match which {
                    Sel::Op => sel.op,
                    Sel::Col => sel.column,
                    Sel::Arg => sel.argument,
                };
                onehot[[b, i]] = S::one();
                idx.push(i);
            }
            let soft = g.softmax(beta);
            return (g.straight_through(soft, onehot), idx);
        }
        let out = gumbel_softmax(g, beta, self.cfg.tau, true, noise).expect("tau validated");
        (out.hard.expect("hard requested"), out.hard_indices)
    }
}

#[derive(Clone, Copy)]
enum Sel {
    Op,
    Col,
    Arg,
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

const CHECKPOINT_MAGIC: &[u8; 4] = b"ESTN";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes every parameter group as name + shape + f32 little-endian data.
pub fn save_checkpoint<S: Scalar>(store: &ParamStore<S>, path: &Path) -> Result<(), ModelError> {
    let err = |message: String| ModelError::Checkpoint { path: path.display().to_string(), message };
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (_, p) in store.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.iter() {
            out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
    }
    std::fs::write(path, out).map_err(|e| err(e.to_string()))
}

/// Reads a checkpoint into (name, array) pairs.
pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, ArrayD<f32>)>, ModelError> {
    fn take<'a>(bytes: &'a [u8], cur: &mut usize, n: usize) -> Option<&'a [u8]> {
        if *cur + n > bytes.len() {
            return None;
        }
        let s = &bytes[*cur..*cur + n];
        *cur += n;
        Some(s)
    }
    fn u32le(s: &[u8]) -> u32 {
        u32::from_le_bytes(s.try_into().unwrap())
    }
    let err = |message: String| ModelError::Checkpoint { path: path.display().to_string(), message };
    let bytes = std::fs::read(path).map_err(|e| err(e.to_string()))?;
    let mut cur = 0usize;
    let trunc = || ModelError::Checkpoint {
        path: path.display().to_string(),
        message: "truncated checkpoint".into(),
    };
    if take(&bytes, &mut cur, 4).ok_or_else(trunc)? != CHECKPOINT_MAGIC {
        return Err(err("bad magic".into()));
    }
    let version = u32le(take(&bytes, &mut cur, 4).ok_or_else(trunc)?);
    if version != CHECKPOINT_VERSION {
        return Err(err(format!("unsupported checkpoint version {version}")));
    }
    let count = u32le(take(&bytes, &mut cur, 4).ok_or_else(trunc)?) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32le(take(&bytes, &mut cur, 4).ok_or_else(trunc)?) as usize;
        let name = String::from_utf8(take(&bytes, &mut cur, name_len).ok_or_else(trunc)?.to_vec())
            .map_err(|e| err(e.to_string()))?;
        let ndim = u32le(take(&bytes, &mut cur, 4).ok_or_else(trunc)?) as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u32le(take(&bytes, &mut cur, 4).ok_or_else(trunc)?) as usize);
        }
        let n: usize = shape.iter().product();
        let data_bytes = take(&bytes, &mut cur, 4 * n).ok_or_else(trunc)?;
        let data: Vec<f32> =
            data_bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|e| err(e.to_string()))?;
        out.push((name, arr));
    }
    Ok(out)
}

/// Copies every checkpoint group whose name starts with `prefix` into the
/// store (matching by exact name). Returns how many parameters were loaded.
pub fn load_group_into<S: Scalar>(
    store: &mut ParamStore<S>,
    path: &Path,
    prefix: &str,
) -> Result<usize, ModelError> {
    let groups = read_checkpoint(path)?;
    let mut loaded = 0;
    let ids: Vec<ParamId> = store.ids_by_prefix("");
    let mut by_name: HashMap<String, ParamId> = HashMap::new();
    for id in ids {
        by_name.insert(store.get(id).name.clone(), id);
    }
    for (name, arr) in groups {
        if !name.starts_with(prefix) {
            continue;
        }
        let Some(&id) = by_name.get(&name) else {
            return Err(ModelError::Checkpoint {
                path: path.display().to_string(),
                message: format!("checkpoint group {name} not present in model"),
            });
        };
        let p = store.get_mut(id);
        if p.value.shape() != arr.shape() {
            return Err(ModelError::Checkpoint {
                path: path.display().to_string(),
                message: format!("shape mismatch for {name}"),
            });
        }
        p.value = arr.mapv(|v| S::from_f64(v as f64));
        loaded += 1;
    }
    Ok(loaded)
}

/// Loads every group of a checkpoint into the store.
pub fn load_checkpoint<S: Scalar>(store: &mut ParamStore<S>, path: &Path) -> Result<usize, ModelError> {
    load_group_into(store, path, "")
}

/// Convenience: encode one (column, argument) pair into the estimator input
/// layout `[arg] ++ cells`, shape (rows+1, D), at the shared-space scale.
pub fn encode_api_input<S: Scalar>(
    column: &[f32],
    argument: f32,
    codec: &CodecConfig,
    scale: f64,
) -> ArrayD<S> {
    let rows = column.len();
    let mut x = ArrayD::zeros(IxDyn(&[rows + 1, codec.dim]));
    let arg = if argument.is_nan() { encode_nan(codec) } else { encode_number(argument, codec) };
    for (j, &v) in arg.as_slice().iter().enumerate() {
        x[[0, j]] = S::from_f64(v as f64 * scale);
    }
    for (r, &cell) in column.iter().enumerate() {
        for (j, &v) in encode_number(cell, codec).as_slice().iter().enumerate() {
            x[[r + 1, j]] = S::from_f64(v as f64 * scale);
        }
    }
    x
}

/// Hard per-row indicator read off a (B, rows, 2) distribution.
pub fn hard_indicator<S: Scalar>(probs: &ArrayD<S>) -> Vec<Vec<bool>> {
    let (onehot, _) = argmax_onehot(probs);
    let shape = onehot.shape().to_vec();
    let (batch, rows) = (shape[0], shape[1]);
    (0..batch)
        .map(|b| (0..rows).map(|r| onehot[[b, r, 1]] == S::one()).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_taq_split, SplitKind, TaqGenConfig};

    fn tiny_cfg(task: TaskKind) -> EstiNetConfig {
        let mut cfg = EstiNetConfig::new(task);
        cfg.dim = 96;
        cfg.codec = CodecConfig::new(96, 3).unwrap();
        cfg.d_rnn = 32;
        cfg.esti = EstiLayerConfig { n_layers: 1, k_heads: 2, d_ff: 64 };
        cfg
    }

    fn tiny_taq_model() -> (EstiNet<f32>, crate::data::DatasetSplit) {
        let gen = TaqGenConfig { n_questions: 12, n_tables: 2, rows: 5, cols: 3, value_range: (1, 20), seed: 5 };
        let split = generate_taq_split(&gen, SplitKind::Train).unwrap();
        let model = EstiNet::new(tiny_cfg(TaskKind::Taq), split.vocabulary.clone(), 1).unwrap();
        (model, split)
    }

    #[test]
    fn config_invariants_enforced() {
        let mut cfg = EstiNetConfig::new(TaskKind::Taq);
        cfg.codec = CodecConfig::new(96, 3).unwrap();
        assert!(matches!(EstiNet::<f32>::new(cfg, Vocabulary::from_pieces([]), 0), Err(ModelError::Config(_))));
        let mut cfg2 = EstiNetConfig::new(TaskKind::Taq);
        cfg2.tau = 0.0;
        assert!(EstiNet::<f32>::new(cfg2, Vocabulary::from_pieces([]), 0).is_err());
    }

    #[test]
    fn external_mode_requires_hard_selection() {
        let (model, split) = tiny_taq_model();
        let cache = model.build_table_cache(&split.tables);
        let samples: Vec<&QaSample> = split.samples.as_taq().unwrap().iter().take(2).collect();
        let mut g = Graph::new();
        let input = BatchInput::Taq { samples: &samples, cache: &cache };
        let opts = ForwardOptions {
            selection: SelectionMode::Soft,
            esti_mode: EstiMode::External,
            hard_branch: false,
            noise: None,
            forced: None,
        };
        assert!(matches!(model.forward(&mut g, &input, opts), Err(ModelError::ExternalNeedsHard)));
    }

    #[test]
    fn forward_shapes_and_alpha_normalization() {
        let (model, split) = tiny_taq_model();
        let cache = model.build_table_cache(&split.tables);
        let samples: Vec<&QaSample> = split.samples.as_taq().unwrap().iter().take(4).collect();
        let mut g = Graph::new();
        let input = BatchInput::Taq { samples: &samples, cache: &cache };
        let opts = ForwardOptions {
            selection: SelectionMode::Soft,
            esti_mode: EstiMode::Layers,
            hard_branch: true,
            noise: None,
            forced: None,
        };
        let f = model.forward(&mut g, &input, opts).unwrap();
        assert_eq!(g.value(f.row_probs).shape(), &[4, 5, 2]);
        for lane in g.value(f.alphas.op).lanes(ndarray::Axis(1)) {
            let s: f32 = lane.sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        // rows normalized
        for b in 0..4 {
            for r in 0..5 {
                let p = g.value(f.row_probs);
                assert!((p[[b, r, 0]] + p[[b, r, 1]] - 1.0).abs() < 1e-5);
            }
        }
        let hard = f.hard.unwrap();
        assert_eq!(hard.selections.len(), 4);
        assert_eq!(g.value(hard.z_hard).shape(), &[4, 6, 96]);
        assert_eq!(g.value(hard.probs.unwrap()).shape(), &[4, 5, 2]);
    }

    #[test]
    fn gold_forced_external_reproduces_gold_rows() {
        let (model, split) = tiny_taq_model();
        let cache = model.build_table_cache(&split.tables);
        let samples: Vec<&QaSample> = split.samples.as_taq().unwrap().iter().collect();
        let forced: Vec<HardSelections> = samples
            .iter()
            .map(|s| HardSelections {
                op: model.op_index(s.gold_op),
                column: s.gold_column,
                argument: s.gold_arg_token.unwrap_or(0),
            })
            .collect();
        let mut g = Graph::new();
        let input = BatchInput::Taq { samples: &samples, cache: &cache };
        let opts = ForwardOptions {
            selection: SelectionMode::Hard,
            esti_mode: EstiMode::External,
            hard_branch: false,
            noise: None,
            forced: Some(&forced),
        };
        let f = model.forward(&mut g, &input, opts).unwrap();
        let indicators = hard_indicator(g.value(f.row_probs));
        for (s, got) in samples.iter().zip(indicators) {
            assert_eq!(&got, &s.gold_rows, "gold selections through the API must answer gold rows");
        }
    }

    #[test]
    fn mixture_consistency_one_hot_soft_equals_hard_routing() {
        let (model, split) = tiny_taq_model();
        let cache = model.build_table_cache(&split.tables);
        let samples: Vec<&QaSample> = split.samples.as_taq().unwrap().iter().take(3).collect();
        let forced: Vec<HardSelections> = samples
            .iter()
            .enumerate()
            .map(|(i, s)| HardSelections {
                op: i % model.ops.len(),
                column: s.gold_column,
                argument: s.gold_arg_token.unwrap_or(1),
            })
            .collect();

        // soft path with forced one-hot weights
        let mut g1 = Graph::new();
        let input1 = BatchInput::Taq { samples: &samples, cache: &cache };
        let f1 = model
            .forward(
                &mut g1,
                &input1,
                ForwardOptions {
                    selection: SelectionMode::Soft,
                    esti_mode: EstiMode::Layers,
                    hard_branch: false,
                    noise: None,
                    forced: Some(&forced),
                },
            )
            .unwrap();

        // hard routing with the same selections
        let mut g2 = Graph::new();
        let input2 = BatchInput::Taq { samples: &samples, cache: &cache };
        let f2 = model
            .forward(
                &mut g2,
                &input2,
                ForwardOptions {
                    selection: SelectionMode::Hard,
                    esti_mode: EstiMode::Layers,
                    hard_branch: false,
                    noise: None,
                    forced: Some(&forced),
                },
            )
            .unwrap();

        assert_eq!(g1.value(f1.row_probs), g2.value(f2.row_probs), "bit-exact mixture collapse");
    }

    #[test]
    fn lwp_forward_and_gold_replay() {
        use crate::data::{generate_lwp_split, lwp_gold_selection};
        let split = generate_lwp_split(8, 3, SplitKind::Train);
        let model = EstiNet::<f32>::new(tiny_cfg(TaskKind::Lwp), split.vocabulary.clone(), 2).unwrap();
        let samples: Vec<&LwpSample> = split.samples.as_lwp().unwrap().iter().collect();
        let forced: Vec<HardSelections> = samples.iter().map(|s| lwp_gold_selection(s)).collect();
        let mut g = Graph::new();
        let input = BatchInput::Lwp { samples: &samples };
        let f = model
            .forward(
                &mut g,
                &input,
                ForwardOptions {
                    selection: SelectionMode::Hard,
                    esti_mode: EstiMode::External,
                    hard_branch: false,
                    noise: None,
                    forced: Some(&forced),
                },
            )
            .unwrap();
        assert_eq!(f.rows, 1);
        let indicators = hard_indicator(g.value(f.row_probs));
        for (s, ind) in samples.iter().zip(indicators) {
            assert_eq!(ind[0], s.gold_label);
        }
        let hard = f.hard.expect("hard mode carries the branch");
        assert!(hard.probs.is_none(), "external mode runs no estimator");
        assert!(hard.adapted.iter().all(|a| !a.violation));
    }

    #[test]
    fn checkpoint_round_trip_and_group_load() {
        let (model, _) = tiny_taq_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model.params, &path).unwrap();

        let (mut model2, _) = tiny_taq_model();
        // perturb, then load back only one estimator group
        for i in 0..model2.params.len() {
            model2.params.get_mut(ParamId(i)).value += 0.5;
        }
        let loaded = load_group_into(&mut model2.params, &path, "esti.max.").unwrap();
        assert!(loaded > 0);
        for (id, p) in model.params.iter() {
            let q = model2.params.get(id);
            if p.name.starts_with("esti.max.") {
                assert_eq!(p.value, q.value, "{} must round-trip", p.name);
            } else {
                assert_ne!(p.value, q.value, "{} should remain perturbed", p.name);
            }
        }

        // full load restores everything
        let n = load_checkpoint(&mut model2.params, &path).unwrap();
        assert_eq!(n, model.params.len());
        assert_eq!(model.params.value_bytes(), model2.params.value_bytes());
    }

    #[test]
    fn unknown_group_rejected() {
        let (model, _) = tiny_taq_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&model.params, &path).unwrap();
        let mut other = EstiNet::<f32>::new(tiny_cfg(TaskKind::Lwp), Vocabulary::from_pieces([]), 0).unwrap();
        // TAQ checkpoint has esti.equal_to.*; the LWP model does not
        assert!(load_group_into(&mut other.params, &path, "esti.equal_to.").is_err());
    }
}
