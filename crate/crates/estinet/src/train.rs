//! The total loss, online API-label generation, gradient-flow control, and
//! the five training procedures.
//!
//! Total loss: `L = L_model + lambda1 * L_online_soft + lambda2 *
//! L_online_hard`, every term a mean per-row binary cross-entropy. The model
//! term trains everything; the online terms train only the estimators —
//! their gradients are stopped exactly at the estimator inputs and at the op
//! mixture weights, so every non-estimator parameter receives exactly zero
//! gradient from them.
//!
//! Procedures:
//! - `Plain`: task loss only.
//! - `Offline`: load pretrained estimators, freeze them, train the rest.
//! - `OfflineTrainable`: same, but the optimizer keeps updating them.
//! - `Online`: joint multi-task training from random initialization; the
//!   API label `y_api` is generated fresh each step from the model's own
//!   hard selections.
//! - `OnlinePretraining`: load pretrained estimators, then run `Online`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DatasetSplit, LwpSample, QaSample, Samples, TaskKind};
use crate::eval::{estilayer_accuracy, evaluate_samples, EvalMode, EvalReport};
use crate::graph::{Adam, Graph, NodeId, ParamStore, Scalar};
use crate::model::{
    encode_api_input, load_group_into, BatchInput, EstiLayer, EstiMode, EstiNet, EstiNetConfig,
    Forward, ForwardOptions, ModelError, SelectionMode,
};
use crate::oracle::{execute, sample_api_io, AdaptedCall, IoPair, LogicOp};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training config error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// The five training procedures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingProcedure {
    Plain,
    Offline,
    OfflineTrainable,
    Online,
    OnlinePretraining,
}

impl TrainingProcedure {
    pub const ALL: [TrainingProcedure; 5] = [
        TrainingProcedure::Plain,
        TrainingProcedure::Offline,
        TrainingProcedure::OfflineTrainable,
        TrainingProcedure::Online,
        TrainingProcedure::OnlinePretraining,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainingProcedure::Plain => "plain",
            TrainingProcedure::Offline => "offline",
            TrainingProcedure::OfflineTrainable => "offline_trainable",
            TrainingProcedure::Online => "online",
            TrainingProcedure::OnlinePretraining => "online_pretraining",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    /// Whether the online losses are active.
    pub fn is_online(self) -> bool {
        matches!(self, TrainingProcedure::Online | TrainingProcedure::OnlinePretraining)
    }

    /// Whether pretrained estimator checkpoints must be supplied.
    pub fn needs_pretrained(self) -> bool {
        matches!(
            self,
            TrainingProcedure::Offline
                | TrainingProcedure::OfflineTrainable
                | TrainingProcedure::OnlinePretraining
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Stop once the per-epoch train-accuracy estimate reaches this value.
    pub early_stop_train_acc: Option<f64>,
    /// Whether the task loss also updates estimator parameters during
    /// online training ("jointly trains"; switchable because the paper does
    /// not pin it).
    pub esti_update_from_task: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            tau: 1.0,
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 40,
            seed: 0,
            early_stop_train_acc: None,
            esti_update_from_task: true,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(TrainError::Config("lambda weights must be non-negative".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(TrainError::Config("batch size and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// The three loss terms and their weighted sum for one batch or epoch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_model: f64,
    pub l_online_soft: f64,
    pub l_online_hard: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(l_model: f64, l_soft: f64, l_hard: f64, lambda1: f64, lambda2: f64) -> Self {
        Self {
            l_model,
            l_online_soft: l_soft,
            l_online_hard: l_hard,
            total: l_model + lambda1 * l_soft + lambda2 * l_hard,
        }
    }
}

/// The API label for one sample: the application's answer on the adapted
/// hard selections, plus the violation flag that excludes the sample from
/// the online losses.
#[derive(Debug, Clone, PartialEq)]
pub struct ApiLabel {
    pub indicator: Vec<bool>,
    pub violation: bool,
}

/// `y_api = f_api(f_adp(z_hard))`: executes the adapted call. Produced fresh
/// each step from the model's own hard selections; no gradient flows through
/// this path.
pub fn generate_api_label(adapted: &AdaptedCall) -> ApiLabel {
    let response = execute(&adapted.call);
    ApiLabel { indicator: response.indicator, violation: adapted.violation || response.violation }
}

/// One-hot (B, rows, 2) target from per-sample indicators.
pub fn indicator_targets<S: Scalar>(indicators: &[Vec<bool>]) -> ArrayD<S> {
    let batch = indicators.len();
    let rows = indicators[0].len();
    let mut t = ArrayD::zeros(IxDyn(&[batch, rows, 2]));
    for (b, ind) in indicators.iter().enumerate() {
        for (r, &on) in ind.iter().enumerate() {
            t[[b, r, if on { 1 } else { 0 }]] = S::one();
        }
    }
    t
}

fn gold_indicators_taq(samples: &[&QaSample]) -> Vec<Vec<bool>> {
    samples.iter().map(|s| s.gold_rows.clone()).collect()
}

fn gold_indicators_lwp(samples: &[&LwpSample]) -> Vec<Vec<bool>> {
    samples.iter().map(|s| vec![s.gold_label]).collect()
}

/// Loss nodes for one batch plus the evaluated breakdown.
pub struct BatchLosses {
    pub l_model: NodeId,
    pub l_online_soft: Option<NodeId>,
    pub l_online_hard: Option<NodeId>,
    pub breakdown: LossBreakdown,
}

/// Builds the loss terms on the graph. The online terms are present when the
/// forward pass carries a hard branch and a lambda is positive; violated
/// samples get zero weight there while still contributing to the task loss.
pub fn compute_total_loss<S: Scalar>(
    g: &mut Graph<S>,
    fwd: &Forward,
    gold: &[Vec<bool>],
    lambda1: f64,
    lambda2: f64,
) -> BatchLosses {
    let batch = fwd.batch_size;
    let rows = fwd.rows;
    let gold_t = indicator_targets::<S>(gold);
    let ones = ArrayD::from_elem(IxDyn(&[batch, rows]), S::one());
    let l_model = g.cross_entropy_mean(fwd.row_probs, gold_t, ones);

    let (mut l_soft, mut l_hard) = (None, None);
    if (lambda1 > 0.0 || lambda2 > 0.0) && fwd.hard.is_some() {
        let hard = fwd.hard.as_ref().unwrap();
        let labels: Vec<ApiLabel> = hard.adapted.iter().map(generate_api_label).collect();
        let y_api: Vec<Vec<bool>> = labels.iter().map(|l| l.indicator.clone()).collect();
        let y_api_t = indicator_targets::<S>(&y_api);
        let mut w = ArrayD::zeros(IxDyn(&[batch, rows]));
        for (b, label) in labels.iter().enumerate() {
            if !label.violation {
                w.index_axis_mut(ndarray::Axis(0), b).fill(S::one());
            }
        }
        if lambda1 > 0.0 {
            l_soft = Some(g.cross_entropy_mean(fwd.row_probs, y_api_t.clone(), w.clone()));
        }
        if lambda2 > 0.0 {
            let probs_hard = hard.probs.expect("online loss needs the estimator branch");
            l_hard = Some(g.cross_entropy_mean(probs_hard, y_api_t, w));
        }
    }

    let val = |n: Option<NodeId>| n.map(|n| g.value(n)[[]].to_f64()).unwrap_or(0.0);
    let breakdown = LossBreakdown::combine(
        g.value(l_model)[[]].to_f64(),
        val(l_soft),
        val(l_hard),
        lambda1,
        lambda2,
    );
    BatchLosses { l_model, l_online_soft: l_soft, l_online_hard: l_hard, breakdown }
}

/// Runs the two-phase backward pass: online losses first (stopped at the
/// estimator inputs), then the task loss (optionally excluding estimator
/// parameters).
pub fn backward_total_loss<S: Scalar>(
    g: &Graph<S>,
    losses: &BatchLosses,
    fwd: &Forward,
    store: &mut ParamStore<S>,
    lambda1: f64,
    lambda2: f64,
    esti_update_from_task: bool,
) {
    let mut online_seeds = Vec::new();
    if let Some(l) = losses.l_online_soft {
        online_seeds.push((l, S::from_f64(lambda1)));
    }
    if let Some(l) = losses.l_online_hard {
        online_seeds.push((l, S::from_f64(lambda2)));
    }
    if !online_seeds.is_empty() {
        let stops: HashSet<NodeId> = fwd.online_stops.iter().copied().collect();
        g.backward(&online_seeds, &stops, store, None);
    }
    let no_stops = HashSet::new();
    if esti_update_from_task {
        g.backward(&[(losses.l_model, S::one())], &no_stops, store, None);
    } else {
        let esti_ids: HashSet<usize> =
            store.ids_by_prefix("esti.").into_iter().map(|id| id.0).collect();
        let filter = move |id: crate::graph::ParamId| !esti_ids.contains(&id.0);
        g.backward(&[(losses.l_model, S::one())], &no_stops, store, Some(&filter));
    }
}

// ---------------------------------------------------------------------------
// estimator pretraining
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PretrainParams {
    pub n_pairs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Elementwise train accuracy that counts as converged.
    pub threshold: f64,
    pub seed: u64,
}

impl Default for PretrainParams {
    fn default() -> Self {
        Self { n_pairs: 20_000, epochs: 8, batch_size: 64, learning_rate: 1e-3, threshold: 0.99, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub op: LogicOp,
    pub reached_threshold: bool,
    pub final_accuracy: f64,
    pub epochs_run: usize,
}

/// Encodes io pairs into the estimator input layout plus one-hot targets.
pub fn encode_io_batch<S: Scalar>(
    pairs: &[&IoPair],
    codec: &crate::codec::CodecConfig,
    scale: f64,
) -> (ArrayD<S>, ArrayD<S>) {
    let batch = pairs.len();
    let rows = pairs[0].column.len();
    let mut x = ArrayD::zeros(IxDyn(&[batch, rows + 1, codec.dim]));
    for (i, p) in pairs.iter().enumerate() {
        let enc = encode_api_input::<S>(&p.column, p.argument, codec, scale);
        x.index_axis_mut(ndarray::Axis(0), i).assign(&enc);
    }
    let outputs: Vec<Vec<bool>> = pairs.iter().map(|p| p.output.clone()).collect();
    (x, indicator_targets(&outputs))
}

/// Supervised training of a single estimator on application io pairs.
/// Returns the trained parameter store (groups named `esti.<op>.*`, loadable
/// into a full model) and a convergence report. A threshold miss is reported,
/// not fatal; the best-so-far parameters are returned.
pub fn pretrain_estilayer<S: Scalar>(
    op: LogicOp,
    pairs: &[IoPair],
    model_cfg: &EstiNetConfig,
    pp: &PretrainParams,
) -> (ParamStore<S>, PretrainReport) {
    assert!(!pairs.is_empty(), "no pretraining pairs");
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(pp.seed ^ 0x13e7 ^ (op as u64) << 8);
    let layer = EstiLayer::new(&mut store, &mut rng, &format!("esti.{}", op.name()), model_cfg.dim, &model_cfg.esti);

    let eval_n = pairs.len().min(2000);
    let elementwise = |store: &ParamStore<S>| -> f64 {
        let mut hits = 0usize;
        let mut total = 0usize;
        for chunk in pairs[..eval_n].chunks(256) {
            let refs: Vec<&IoPair> = chunk.iter().collect();
            let (x, _) = encode_io_batch::<S>(&refs, &model_cfg.codec, model_cfg.embed_scale);
            let mut g = Graph::new();
            let xn = g.constant(x);
            let probs = layer.forward(&mut g, store, xn);
            let v = g.value(probs);
            for (i, p) in chunk.iter().enumerate() {
                for (r, &want) in p.output.iter().enumerate() {
                    if (v[[i, r, 1]] > v[[i, r, 0]]) == want {
                        hits += 1;
                    }
                    total += 1;
                }
            }
        }
        hits as f64 / total as f64
    };

    let mut adam = Adam::new(S::from_f64(pp.learning_rate), &store);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(pp.seed ^ 0x0dd5 ^ op as u64);
    let no_stops = HashSet::new();
    let mut best: Option<(f64, ParamStore<S>)> = None;
    let mut epochs_run = 0;
    for _epoch in 0..pp.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(pp.batch_size) {
            let refs: Vec<&IoPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let (x, t) = encode_io_batch::<S>(&refs, &model_cfg.codec, model_cfg.embed_scale);
            let rows = refs[0].column.len();
            let mut g = Graph::new();
            let xn = g.constant(x);
            let probs = layer.forward(&mut g, &store, xn);
            let w = ArrayD::from_elem(IxDyn(&[refs.len(), rows]), S::one());
            let loss = g.cross_entropy_mean(probs, t, w);
            g.backward(&[(loss, S::one())], &no_stops, &mut store, None);
            adam.step(&mut store);
        }
        epochs_run += 1;
        let acc = elementwise(&store);
        if best.as_ref().map(|(b, _)| acc > *b).unwrap_or(true) {
            best = Some((acc, store.clone()));
        }
        if acc >= pp.threshold {
            break;
        }
    }
    // a threshold miss is flagged, and the best-so-far parameters are kept
    let (final_accuracy, store) = best.expect("at least one epoch ran");
    let report = PretrainReport {
        op,
        reached_threshold: final_accuracy >= pp.threshold,
        final_accuracy,
        epochs_run,
    };
    (store, report)
}

// ---------------------------------------------------------------------------
// the training loop
// ---------------------------------------------------------------------------

/// What to measure each epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalPlan {
    /// Train-accuracy estimate over this many samples (0 = full set).
    pub train_probe: usize,
    /// Evaluate the test split (test + inference modes) each epoch.
    pub eval_test: bool,
    /// Probe estimator exact-match accuracy with this many io pairs per op
    /// and range (0 = skip).
    pub estilayer_probe: usize,
    pub train_range: (i64, i64),
    pub test_range: (i64, i64),
}

impl Default for EvalPlan {
    fn default() -> Self {
        Self { train_probe: 1000, eval_test: true, estilayer_probe: 0, train_range: (1, 100), test_range: (300, 400) }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub train_accuracy: f64,
    pub selector_op: f64,
    pub selector_col: f64,
    pub selector_arg: f64,
    pub violation_rate: f64,
    pub test_accuracy: Option<f64>,
    pub inference_accuracy: Option<f64>,
    pub estilayer_train: Vec<(LogicOp, f64)>,
    pub estilayer_test: Vec<(LogicOp, f64)>,
    pub wall_secs: f64,
}

pub struct TrainOutcome<S: Scalar> {
    pub model: EstiNet<S>,
    pub epochs: Vec<EpochMetrics>,
    /// Final full-split reports: train set, then test set (test mode) and
    /// test set (inference mode) when a test split was given.
    pub final_train: EvalReport,
    pub final_test: Option<EvalReport>,
    pub final_inference: Option<EvalReport>,
}

fn pretrained_path(dir: &Path, op: LogicOp) -> PathBuf {
    dir.join(format!("esti_{}.ckpt", op.name()))
}

/// Writes one checkpoint per op into `dir` using [`pretrain_estilayer`].
pub fn pretrain_all<S: Scalar>(
    ops: &[LogicOp],
    rows: usize,
    model_cfg: &EstiNetConfig,
    pp: &PretrainParams,
    value_range: (i64, i64),
    dir: &Path,
) -> Result<Vec<PretrainReport>, TrainError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| TrainError::Config(format!("cannot create {}: {e}", dir.display())))?;
    let mut reports = Vec::new();
    for &op in ops {
        let pairs = sample_api_io(op, pp.n_pairs, rows, value_range, pp.seed ^ 0x10);
        let (store, report) = pretrain_estilayer::<S>(op, &pairs, model_cfg, pp);
        crate::model::save_checkpoint(&store, &pretrained_path(dir, op))?;
        reports.push(report);
    }
    Ok(reports)
}

/// Trains one model with the given procedure. Deterministic given
/// (procedure, datasets, hyperparams, seed).
pub fn run_training<S: Scalar>(
    mut model_cfg: EstiNetConfig,
    procedure: TrainingProcedure,
    hp: &Hyperparams,
    plan: &EvalPlan,
    train: &DatasetSplit,
    test: Option<&DatasetSplit>,
    pretrained_dir: Option<&Path>,
) -> Result<TrainOutcome<S>, TrainError> {
    hp.validate()?;
    model_cfg.tau = hp.tau;
    if procedure.needs_pretrained() && pretrained_dir.is_none() {
        return Err(TrainError::Config(format!(
            "procedure {} requires pretrained estimator checkpoints",
            procedure.name()
        )));
    }

    let mut model: EstiNet<S> = EstiNet::new(model_cfg, train.vocabulary.clone(), hp.seed)?;
    if let Some(dir) = pretrained_dir.filter(|_| procedure.needs_pretrained()) {
        for &op in model.ops.clone().iter() {
            let path = pretrained_path(dir, op);
            if !path.exists() {
                return Err(TrainError::Config(format!(
                    "missing pretrained checkpoint {}",
                    path.display()
                )));
            }
            load_group_into(&mut model.params, &path, &format!("esti.{}.", op.name()))?;
        }
    }
    if procedure == TrainingProcedure::Offline {
        model.params.set_trainable_by_prefix("esti.", false);
    }

    // effective online weights: the non-online procedures train on the task
    // loss alone
    let (lambda1, lambda2) = if procedure.is_online() { (hp.lambda1, hp.lambda2) } else { (0.0, 0.0) };
    let online = lambda1 > 0.0 || lambda2 > 0.0;

    let train_cache = model.build_table_cache(&train.tables);
    let test_cache = test.map(|t| model.build_table_cache(&t.tables));
    let rows = match train.task {
        TaskKind::Taq => train_cache.rows,
        TaskKind::Lwp => 1,
    };

    // fixed probe sets
    let probe_n = if plan.train_probe == 0 { train.len() } else { plan.train_probe.min(train.len()) };
    let probe_samples = subset(&train.samples, probe_n);
    let esti_probe: Vec<(LogicOp, Vec<IoPair>, Vec<IoPair>)> = if plan.estilayer_probe > 0 {
        model
            .ops
            .iter()
            .map(|&op| {
                (
                    op,
                    sample_api_io(op, plan.estilayer_probe, rows, plan.train_range, hp.seed ^ 0x21),
                    sample_api_io(op, plan.estilayer_probe, rows, plan.test_range, hp.seed ^ 0x22),
                )
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut adam = Adam::new(S::from_f64(hp.learning_rate), &model.params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(hp.seed ^ 0x5bff1e);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(hp.seed ^ 0x601d);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epochs = Vec::new();

    for epoch in 0..hp.epochs {
        let t0 = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let mut sums = LossBreakdown::default();
        let mut batches = 0usize;
        for chunk in order.chunks(hp.batch_size) {
            let losses = match &train.samples {
                Samples::Taq(v) => {
                    let refs: Vec<&QaSample> = chunk.iter().map(|&i| &v[i]).collect();
                    let gold = gold_indicators_taq(&refs);
                    let input = BatchInput::Taq { samples: &refs, cache: &train_cache };
                    train_step(&mut model, &input, &gold, lambda1, lambda2, online, hp, &mut adam, &mut noise_rng)
                }
                Samples::Lwp(v) => {
                    let refs: Vec<&LwpSample> = chunk.iter().map(|&i| &v[i]).collect();
                    let gold = gold_indicators_lwp(&refs);
                    let input = BatchInput::Lwp { samples: &refs };
                    train_step(&mut model, &input, &gold, lambda1, lambda2, online, hp, &mut adam, &mut noise_rng)
                }
            };
            sums.l_model += losses.l_model;
            sums.l_online_soft += losses.l_online_soft;
            sums.l_online_hard += losses.l_online_hard;
            sums.total += losses.total;
            batches += 1;
        }
        let inv = 1.0 / batches.max(1) as f64;
        let loss = LossBreakdown {
            l_model: sums.l_model * inv,
            l_online_soft: sums.l_online_soft * inv,
            l_online_hard: sums.l_online_hard * inv,
            total: sums.total * inv,
        };

        let probe = evaluate_samples(&model, &probe_samples, &train_cache, EvalMode::TrainSetTest, 256);
        let (test_accuracy, inference_accuracy) = match (plan.eval_test, test, &test_cache) {
            (true, Some(t), Some(c)) => (
                Some(evaluate_samples(&model, &t.samples, c, EvalMode::TestSetTest, 256).task_accuracy),
                Some(evaluate_samples(&model, &t.samples, c, EvalMode::Inference, 256).task_accuracy),
            ),
            _ => (None, None),
        };
        let estilayer_train: Vec<(LogicOp, f64)> = esti_probe
            .iter()
            .map(|(op, tr, _)| (*op, estilayer_accuracy(&model, *op, tr)))
            .collect();
        let estilayer_test: Vec<(LogicOp, f64)> = esti_probe
            .iter()
            .map(|(op, _, te)| (*op, estilayer_accuracy(&model, *op, te)))
            .collect();

        let m = EpochMetrics {
            epoch,
            loss,
            train_accuracy: probe.task_accuracy,
            selector_op: probe.selector_accuracy.op,
            selector_col: probe.selector_accuracy.col,
            selector_arg: probe.selector_accuracy.arg,
            violation_rate: probe.violation_rate,
            test_accuracy,
            inference_accuracy,
            estilayer_train,
            estilayer_test,
            wall_secs: t0.elapsed().as_secs_f64(),
        };
        if std::env::var_os("ESTINET_PROGRESS").is_some() {
            eprintln!(
                "[{}/{} epoch {epoch}] loss {:.4} train {:.3} sel {:.2}/{:.2}/{:.2} test {} inf {} ({:.1}s)",
                procedure.name(),
                hp.seed,
                m.loss.total,
                m.train_accuracy,
                m.selector_op,
                m.selector_col,
                m.selector_arg,
                m.test_accuracy.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
                m.inference_accuracy.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
                m.wall_secs
            );
        }
        epochs.push(m);

        if let Some(stop) = hp.early_stop_train_acc {
            if probe.task_accuracy >= stop {
                break;
            }
        }
    }

    let final_train = evaluate_samples(&model, &train.samples, &train_cache, EvalMode::TrainSetTest, 256);
    let (final_test, final_inference) = match (test, &test_cache) {
        (Some(t), Some(c)) => (
            Some(evaluate_samples(&model, &t.samples, c, EvalMode::TestSetTest, 256)),
            Some(evaluate_samples(&model, &t.samples, c, EvalMode::Inference, 256)),
        ),
        _ => (None, None),
    };
    Ok(TrainOutcome { model, epochs, final_train, final_test, final_inference })
}

fn subset(samples: &Samples, n: usize) -> Samples {
    match samples {
        Samples::Taq(v) => Samples::Taq(v.iter().take(n).cloned().collect()),
        Samples::Lwp(v) => Samples::Lwp(v.iter().take(n).cloned().collect()),
    }
}

#[allow(clippy::too_many_arguments)]
fn train_step<S: Scalar>(
    model: &mut EstiNet<S>,
    input: &BatchInput<S>,
    gold: &[Vec<bool>],
    lambda1: f64,
    lambda2: f64,
    online: bool,
    hp: &Hyperparams,
    adam: &mut Adam<S>,
    noise_rng: &mut ChaCha8Rng,
) -> LossBreakdown {
    let mut g = Graph::new();
    let opts = ForwardOptions {
        selection: SelectionMode::Soft,
        esti_mode: EstiMode::Layers,
        hard_branch: online,
        noise: if online { Some(noise_rng) } else { None },
        forced: None,
    };
    let fwd = model.forward(&mut g, input, opts).expect("train forward");
    let losses = compute_total_loss(&mut g, &fwd, gold, lambda1, lambda2);
    backward_total_loss(&g, &losses, &fwd, &mut model.params, lambda1, lambda2, hp.esti_update_from_task);
    adam.step(&mut model.params);
    losses.breakdown
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::data::{generate_taq_split, SplitKind, TaqGenConfig};
    use crate::model::EstiLayerConfig;
    use crate::oracle::HardSelections;

    fn tiny_cfg(task: TaskKind) -> EstiNetConfig {
        let mut cfg = EstiNetConfig::new(task);
        cfg.dim = 96;
        cfg.codec = CodecConfig::new(96, 3).unwrap();
        cfg.d_rnn = 32;
        cfg.esti = EstiLayerConfig { n_layers: 1, k_heads: 2, d_ff: 64 };
        cfg
    }

    fn tiny_split(n: usize, seed: u64) -> DatasetSplit {
        let gen = TaqGenConfig { n_questions: n, n_tables: 2, rows: 5, cols: 3, value_range: (1, 20), seed };
        generate_taq_split(&gen, SplitKind::Train).unwrap()
    }

    fn tiny_hp() -> Hyperparams {
        Hyperparams { batch_size: 8, epochs: 2, ..Hyperparams::default() }
    }

    #[test]
    fn online_loss_gradients_are_exactly_zero_outside_estimators() {
        let split = tiny_split(16, 3);
        let mut model: EstiNet<f32> =
            EstiNet::new(tiny_cfg(TaskKind::Taq), split.vocabulary.clone(), 7).unwrap();
        let cache = model.build_table_cache(&split.tables);
        let samples: Vec<&QaSample> = split.samples.as_taq().unwrap().iter().collect();
        let gold = gold_indicators_taq(&samples);
        let mut noise = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let input = BatchInput::Taq { samples: &samples, cache: &cache };
        let fwd = model
            .forward(
                &mut g,
                &input,
                ForwardOptions {
                    selection: SelectionMode::Soft,
                    esti_mode: EstiMode::Layers,
                    hard_branch: true,
                    noise: Some(&mut noise),
                    forced: None,
                },
            )
            .unwrap();
        let losses = compute_total_loss(&mut g, &fwd, &gold, 1.0, 1.0);
        assert!(losses.l_online_soft.is_some() && losses.l_online_hard.is_some());

        model.params.zero_grads();
        let stops: HashSet<NodeId> = fwd.online_stops.iter().copied().collect();
        g.backward(
            &[(losses.l_online_soft.unwrap(), 1.0), (losses.l_online_hard.unwrap(), 1.0)],
            &stops,
            &mut model.params,
            None,
        );
        let mut esti_nonzero = false;
        for (_, p) in model.params.iter() {
            if p.name.starts_with("esti.") {
                esti_nonzero |= p.grad.iter().any(|&v| v != 0.0);
            } else {
                assert!(
                    p.grad.iter().all(|&v| v == 0.0),
                    "online loss leaked into {}",
                    p.name
                );
            }
        }
        assert!(esti_nonzero, "online losses must reach estimator parameters");

        // the task loss reaches non-estimator parameters
        model.params.zero_grads();
        g.backward(&[(losses.l_model, 1.0)], &HashSet::new(), &mut model.params, None);
        let selector_touched = model
            .params
            .iter()
            .filter(|(_, p)| p.name.starts_with("sel.") || p.name.starts_with("query."))
            .any(|(_, p)| p.grad.iter().any(|&v| v != 0.0));
        assert!(selector_touched, "task loss must reach selectors and the query encoder");
    }

    #[test]
    fn loss_breakdown_matches_weighted_sum() {
        let split = tiny_split(12, 4);
        let model: EstiNet<f32> =
            EstiNet::new(tiny_cfg(TaskKind::Taq), split.vocabulary.clone(), 9).unwrap();
        let cache = model.build_table_cache(&split.tables);
        let samples: Vec<&QaSample> = split.samples.as_taq().unwrap().iter().collect();
        let gold = gold_indicators_taq(&samples);
        let mut noise = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let input = BatchInput::Taq { samples: &samples, cache: &cache };
        let fwd = model
            .forward(
                &mut g,
                &input,
                ForwardOptions {
                    selection: SelectionMode::Soft,
                    esti_mode: EstiMode::Layers,
                    hard_branch: true,
                    noise: Some(&mut noise),
                    forced: None,
                },
            )
            .unwrap();
        let (l1, l2) = (0.7, 0.3);
        let losses = compute_total_loss(&mut g, &fwd, &gold, l1, l2);
        let b = losses.breakdown;
        assert!(
            (b.total - (b.l_model + l1 * b.l_online_soft + l2 * b.l_online_hard)).abs() < 1e-6
        );
        // lambda = 0 reduces to the model loss alone
        let plain = compute_total_loss(&mut g, &fwd, &gold, 0.0, 0.0);
        assert_eq!(plain.breakdown.total, plain.breakdown.l_model);
        assert_eq!(plain.breakdown.l_online_soft, 0.0);
    }

    #[test]
    fn api_labels_from_gold_selections_match_gold_rows() {
        let split = tiny_split(20, 6);
        let model: EstiNet<f32> =
            EstiNet::new(tiny_cfg(TaskKind::Taq), split.vocabulary.clone(), 2).unwrap();
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
        let fwd = model
            .forward(
                &mut g,
                &input,
                ForwardOptions {
                    selection: SelectionMode::Hard,
                    esti_mode: EstiMode::Layers,
                    hard_branch: true,
                    noise: None,
                    forced: Some(&forced),
                },
            )
            .unwrap();
        let hard = fwd.hard.as_ref().unwrap();
        for (adapted, s) in hard.adapted.iter().zip(&samples) {
            let label = generate_api_label(adapted);
            assert!(!label.violation);
            assert_eq!(label.indicator, s.gold_rows);
        }
    }

    #[test]
    fn violations_are_flagged_and_excluded() {
        let split = tiny_split(10, 8);
        let model: EstiNet<f32> =
            EstiNet::new(tiny_cfg(TaskKind::Taq), split.vocabulary.clone(), 2).unwrap();
        let cache = model.build_table_cache(&split.tables);
        let samples: Vec<&QaSample> = split.samples.as_taq().unwrap().iter().collect();
        // force the entity column (violation) with an op that needs a number
        let forced: Vec<HardSelections> = samples
            .iter()
            .map(|_| HardSelections { op: 0, column: 0, argument: 0 })
            .collect();
        let mut g = Graph::new();
        let input = BatchInput::Taq { samples: &samples, cache: &cache };
        let fwd = model
            .forward(
                &mut g,
                &input,
                ForwardOptions {
                    selection: SelectionMode::Hard,
                    esti_mode: EstiMode::Layers,
                    hard_branch: true,
                    noise: None,
                    forced: Some(&forced),
                },
            )
            .unwrap();
        let hard = fwd.hard.as_ref().unwrap();
        let labels: Vec<ApiLabel> = hard.adapted.iter().map(generate_api_label).collect();
        assert!(labels.iter().all(|l| l.violation));
        assert!(labels.iter().all(|l| l.indicator.iter().all(|&b| !b)));
        // all samples violated -> online losses are zero
        let gold = gold_indicators_taq(&samples);
        let losses = compute_total_loss(&mut g, &fwd, &gold, 1.0, 1.0);
        assert_eq!(losses.breakdown.l_online_soft, 0.0);
        assert_eq!(losses.breakdown.l_online_hard, 0.0);
        assert!(losses.breakdown.l_model > 0.0);
    }

    #[test]
    fn offline_keeps_estimators_bit_identical() {
        let split = tiny_split(24, 10);
        let cfg = tiny_cfg(TaskKind::Taq);
        let dir = tempfile::tempdir().unwrap();
        let pp = PretrainParams { n_pairs: 64, epochs: 1, ..PretrainParams::default() };
        pretrain_all::<f32>(&crate::data::TAQ_OPS, 5, &cfg, &pp, (1, 20), dir.path()).unwrap();

        let hp = tiny_hp();
        let outcome: TrainOutcome<f32> = run_training(
            cfg,
            TrainingProcedure::Offline,
            &hp,
            &EvalPlan { train_probe: 8, eval_test: false, estilayer_probe: 0, ..EvalPlan::default() },
            &split,
            None,
            Some(dir.path()),
        )
        .unwrap();
        // estimator parameters equal the checkpoints bit for bit
        for &op in &crate::data::TAQ_OPS {
            let ckpt = crate::model::read_checkpoint(&dir.path().join(format!("esti_{}.ckpt", op.name()))).unwrap();
            for (name, arr) in ckpt {
                let id = outcome.model.params.ids_by_prefix(&name)[0];
                let got = &outcome.model.params.get(id).value;
                assert_eq!(got.shape(), arr.shape());
                assert!(
                    got.iter().zip(arr.iter()).all(|(a, b)| a.to_bits() == b.to_bits()),
                    "{name} drifted during offline training"
                );
            }
        }
    }

    #[test]
    fn online_with_zero_lambdas_reproduces_plain_trajectory() {
        let split = tiny_split(24, 12);
        let cfg = tiny_cfg(TaskKind::Taq);
        let hp = Hyperparams { lambda1: 0.0, lambda2: 0.0, ..tiny_hp() };
        let plan = EvalPlan { train_probe: 8, eval_test: false, estilayer_probe: 0, ..EvalPlan::default() };
        let plain: TrainOutcome<f32> =
            run_training(cfg, TrainingProcedure::Plain, &hp, &plan, &split, None, None).unwrap();
        let online: TrainOutcome<f32> =
            run_training(cfg, TrainingProcedure::Online, &hp, &plan, &split, None, None).unwrap();
        assert_eq!(plain.model.params.value_bytes(), online.model.params.value_bytes());
        for (a, b) in plain.epochs.iter().zip(&online.epochs) {
            assert_eq!(a.loss.total, b.loss.total);
            assert_eq!(a.train_accuracy, b.train_accuracy);
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let split = tiny_split(16, 13);
        let cfg = tiny_cfg(TaskKind::Taq);
        let hp = Hyperparams { epochs: 1, batch_size: 8, ..Hyperparams::default() };
        let plan = EvalPlan { train_probe: 8, eval_test: false, estilayer_probe: 0, ..EvalPlan::default() };
        let a: TrainOutcome<f32> =
            run_training(cfg, TrainingProcedure::Online, &hp, &plan, &split, None, None).unwrap();
        let b: TrainOutcome<f32> =
            run_training(cfg, TrainingProcedure::Online, &hp, &plan, &split, None, None).unwrap();
        assert_eq!(a.model.params.value_bytes(), b.model.params.value_bytes());
        assert_eq!(a.epochs.len(), b.epochs.len());
    }

    #[test]
    fn missing_pretrained_checkpoints_is_a_config_error() {
        let split = tiny_split(8, 14);
        let cfg = tiny_cfg(TaskKind::Taq);
        let hp = tiny_hp();
        let plan = EvalPlan::default();
        let r: Result<TrainOutcome<f32>, _> =
            run_training(cfg, TrainingProcedure::OnlinePretraining, &hp, &plan, &split, None, None);
        assert!(matches!(r, Err(TrainError::Config(_))));
    }

    #[test]
    fn pretrain_reports_threshold_miss_without_failing() {
        let cfg = tiny_cfg(TaskKind::Taq);
        let pairs = sample_api_io(LogicOp::GreaterThan, 64, 5, (1, 20), 3);
        let pp = PretrainParams { epochs: 1, threshold: 0.999, ..PretrainParams::default() };
        let (store, report) = pretrain_estilayer::<f32>(LogicOp::GreaterThan, &pairs, &cfg, &pp);
        assert!(!report.reached_threshold);
        assert!(report.final_accuracy < 0.999);
        assert_eq!(report.epochs_run, 1);
        assert!(store.len() > 0);
    }
}
