//! Accuracy measurement across the three assessment configurations (train,
//! test, inference) plus component-level diagnostics: per-selector accuracy
//! and estimator exact-match accuracy against the external applications.
//!
//! Evaluation takes `&EstiNet`, so parameter mutation during evaluation is
//! ruled out by construction. Hard selections are deterministic argmax (no
//! Gumbel noise).

use ndarray::IxDyn;

use crate::data::{lwp_gold_selection, DatasetSplit, LwpSample, QaSample, Samples};
use crate::graph::{Graph, Scalar};
use crate::model::{
    encode_api_input, hard_indicator, BatchInput, EstiMode, EstiNet, ForwardOptions, SelectionMode,
    TableCache,
};
use crate::oracle::{HardSelections, IoPair, LogicOp};

/// The three assessment configurations. Inference replaces every estimator
/// with its external application counterpart.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    TrainSetTest,
    TestSetTest,
    Inference,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::TrainSetTest => "train",
            EvalMode::TestSetTest => "test",
            EvalMode::Inference => "inference",
        }
    }

    fn esti_mode(self) -> EstiMode {
        match self {
            EvalMode::Inference => EstiMode::External,
            _ => EstiMode::Layers,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SelectorAccuracy {
    pub op: f64,
    pub col: f64,
    pub arg: f64,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub task_accuracy: f64,
    pub selector_accuracy: SelectorAccuracy,
    /// Exact-match estimator accuracy per op; filled only by explicit probes.
    pub estilayer_accuracy: Vec<(LogicOp, f64)>,
    pub violation_rate: f64,
    /// Fraction of samples where all three selectors match their gold labels.
    pub all_selectors_correct: f64,
    pub n_samples: usize,
}

fn gold_selection_for_qa<S: Scalar>(model: &EstiNet<S>, s: &QaSample) -> (HardSelections, bool) {
    (
        HardSelections {
            op: model.op_index(s.gold_op),
            column: s.gold_column,
            argument: s.gold_arg_token.unwrap_or(usize::MAX),
        },
        s.gold_arg_token.is_some(),
    )
}

struct Tally {
    n: usize,
    task_hits: usize,
    op_hits: usize,
    col_hits: usize,
    arg_hits: usize,
    arg_total: usize,
    all_hits: usize,
    violations: usize,
}

impl Tally {
    fn new() -> Self {
        Tally { n: 0, task_hits: 0, op_hits: 0, col_hits: 0, arg_hits: 0, arg_total: 0, all_hits: 0, violations: 0 }
    }

    fn add(&mut self, predicted: &[bool], gold: &[bool], sel: &HardSelections, gold_sel: &HardSelections, arg_counts: bool, violation: bool) {
        self.n += 1;
        if predicted == gold {
            self.task_hits += 1;
        }
        let op_ok = sel.op == gold_sel.op;
        let col_ok = sel.column == gold_sel.column;
        // samples without a gold argument leave the argument unconstrained
        let arg_ok = !arg_counts || sel.argument == gold_sel.argument;
        if op_ok {
            self.op_hits += 1;
        }
        if col_ok {
            self.col_hits += 1;
        }
        if arg_counts {
            self.arg_total += 1;
            if sel.argument == gold_sel.argument {
                self.arg_hits += 1;
            }
        }
        if op_ok && col_ok && arg_ok {
            self.all_hits += 1;
        }
        if violation {
            self.violations += 1;
        }
    }

    fn report(&self) -> EvalReport {
        let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        EvalReport {
            task_accuracy: frac(self.task_hits, self.n),
            selector_accuracy: SelectorAccuracy {
                op: frac(self.op_hits, self.n),
                col: frac(self.col_hits, self.n),
                arg: frac(self.arg_hits, self.arg_total),
            },
            estilayer_accuracy: Vec::new(),
            violation_rate: frac(self.violations, self.n),
            all_selectors_correct: frac(self.all_hits, self.n),
            n_samples: self.n,
        }
    }
}

/// Evaluates task and selector accuracy with hard selections. `TestSetTest`
/// and `TrainSetTest` run the estimator bank; `Inference` replaces it with
/// the external applications.
pub fn evaluate<S: Scalar>(model: &EstiNet<S>, split: &DatasetSplit, mode: EvalMode) -> EvalReport {
    let cache = model.build_table_cache(&split.tables);
    evaluate_samples(model, &split.samples, &cache, mode, 256)
}

/// Evaluation core against a prebuilt table cache.
pub fn evaluate_samples<S: Scalar>(
    model: &EstiNet<S>,
    samples: &Samples,
    cache: &TableCache<S>,
    mode: EvalMode,
    batch: usize,
) -> EvalReport {
    let mut tally = Tally::new();
    match samples {
        Samples::Taq(v) => {
            let refs: Vec<&QaSample> = v.iter().collect();
            for chunk in refs.chunks(batch) {
                let mut g = Graph::new();
                let input = BatchInput::Taq { samples: chunk, cache };
                let f = model
                    .forward(&mut g, &input, ForwardOptions::eval(mode.esti_mode()))
                    .expect("eval forward");
                let hard = f.hard.as_ref().expect("hard selections in eval");
                let indicators = hard_indicator(g.value(f.row_probs));
                for (i, s) in chunk.iter().enumerate() {
                    let (gold_sel, arg_counts) = gold_selection_for_qa(model, s);
                    tally.add(
                        &indicators[i],
                        &s.gold_rows,
                        &hard.selections[i],
                        &gold_sel,
                        arg_counts,
                        hard.adapted[i].violation,
                    );
                }
            }
        }
        Samples::Lwp(v) => {
            let refs: Vec<&LwpSample> = v.iter().collect();
            for chunk in refs.chunks(batch) {
                let mut g = Graph::new();
                let input = BatchInput::Lwp { samples: chunk };
                let f = model
                    .forward(&mut g, &input, ForwardOptions::eval(mode.esti_mode()))
                    .expect("eval forward");
                let hard = f.hard.as_ref().expect("hard selections in eval");
                let indicators = hard_indicator(g.value(f.row_probs));
                for (i, s) in chunk.iter().enumerate() {
                    let gold_sel = lwp_gold_selection(s);
                    tally.add(
                        &indicators[i],
                        &[s.gold_label],
                        &hard.selections[i],
                        &gold_sel,
                        true,
                        hard.adapted[i].violation,
                    );
                }
            }
        }
    }
    let report = tally.report();
    if mode == EvalMode::Inference {
        // oracle execution is exact, so correct selections without
        // violations answer exactly
        assert!(
            report.task_accuracy >= report.all_selectors_correct - report.violation_rate - 1e-9,
            "monotone composition violated: task {} vs selectors {} - violations {}",
            report.task_accuracy,
            report.all_selectors_correct,
            report.violation_rate
        );
    }
    report
}

/// Per-selector accuracy against the gold labels, measured with the external
/// applications in place (no estimator runs).
pub fn selector_accuracy<S: Scalar>(model: &EstiNet<S>, split: &DatasetSplit) -> SelectorAccuracy {
    let cache = model.build_table_cache(&split.tables);
    evaluate_samples(model, &split.samples, &cache, EvalMode::Inference, 256).selector_accuracy
}

/// Exact-match fraction of one estimator's hard outputs against the
/// application outputs on the given io pairs.
pub fn estilayer_accuracy<S: Scalar>(model: &EstiNet<S>, op: LogicOp, pairs: &[IoPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let layer = model.estilayer(op);
    let mut hits = 0usize;
    for chunk in pairs.chunks(256) {
        let rows = chunk[0].column.len();
        let mut x = ndarray::ArrayD::zeros(IxDyn(&[chunk.len(), rows + 1, model.cfg.dim]));
        for (i, p) in chunk.iter().enumerate() {
            let enc = encode_api_input::<S>(&p.column, p.argument, &model.cfg.codec, model.cfg.embed_scale);
            x.index_axis_mut(ndarray::Axis(0), i).assign(&enc);
        }
        let mut g = Graph::new();
        let xn = g.constant(x);
        let probs = layer.forward(&mut g, &model.params, xn);
        let indicators = hard_indicator(g.value(probs));
        for (ind, p) in indicators.iter().zip(chunk) {
            if ind == &p.output {
                hits += 1;
            }
        }
    }
    hits as f64 / pairs.len() as f64
}

/// Convenience wrapper running a forward pass with gold-forced selections in
/// inference mode; useful for dataset/oracle sanity checks.
pub fn gold_replay_accuracy<S: Scalar>(model: &EstiNet<S>, split: &DatasetSplit) -> f64 {
    let cache = model.build_table_cache(&split.tables);
    let mut hits = 0usize;
    let mut n = 0usize;
    match &split.samples {
        Samples::Taq(v) => {
            let refs: Vec<&QaSample> = v.iter().collect();
            for chunk in refs.chunks(256) {
                let forced: Vec<HardSelections> = chunk
                    .iter()
                    .map(|s| HardSelections {
                        op: model.op_index(s.gold_op),
                        column: s.gold_column,
                        argument: s.gold_arg_token.unwrap_or(0),
                    })
                    .collect();
                let mut g = Graph::new();
                let input = BatchInput::Taq { samples: chunk, cache: &cache };
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
                    .expect("gold replay forward");
                for (ind, s) in hard_indicator(g.value(f.row_probs)).iter().zip(chunk) {
                    n += 1;
                    if ind == &s.gold_rows {
                        hits += 1;
                    }
                }
            }
        }
        Samples::Lwp(v) => {
            let refs: Vec<&LwpSample> = v.iter().collect();
            for chunk in refs.chunks(256) {
                let forced: Vec<HardSelections> = chunk.iter().map(|s| lwp_gold_selection(s)).collect();
                let mut g = Graph::new();
                let input = BatchInput::Lwp { samples: chunk };
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
                    .expect("gold replay forward");
                for (ind, s) in hard_indicator(g.value(f.row_probs)).iter().zip(chunk) {
                    n += 1;
                    if ind[0] == s.gold_label {
                        hits += 1;
                    }
                }
            }
        }
    }
    hits as f64 / n.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::CodecConfig;
    use crate::data::{generate_lwp_split, generate_taq_split, SplitKind, TaqGenConfig, TaskKind};
    use crate::model::{EstiLayerConfig, EstiNetConfig};
    use crate::oracle::sample_api_io;

    fn tiny_model(task: TaskKind, vocab: crate::data::Vocabulary) -> EstiNet<f32> {
        let mut cfg = EstiNetConfig::new(task);
        cfg.dim = 96;
        cfg.codec = CodecConfig::new(96, 3).unwrap();
        cfg.d_rnn = 32;
        cfg.esti = EstiLayerConfig { n_layers: 1, k_heads: 2, d_ff: 64 };
        EstiNet::new(cfg, vocab, 11).unwrap()
    }

    fn tiny_split() -> crate::data::DatasetSplit {
        let gen = TaqGenConfig { n_questions: 40, n_tables: 2, rows: 5, cols: 3, value_range: (1, 20), seed: 9 };
        generate_taq_split(&gen, SplitKind::Train).unwrap()
    }

    #[test]
    fn gold_replay_is_perfect() {
        let split = tiny_split();
        let model = tiny_model(TaskKind::Taq, split.vocabulary.clone());
        assert_eq!(gold_replay_accuracy(&model, &split), 1.0);
        let lwp = generate_lwp_split(40, 4, SplitKind::Train);
        let lwp_model = tiny_model(TaskKind::Lwp, lwp.vocabulary.clone());
        assert_eq!(gold_replay_accuracy(&lwp_model, &lwp), 1.0);
    }

    #[test]
    fn untrained_model_is_near_chance_and_reports_are_consistent() {
        let split = tiny_split();
        let model = tiny_model(TaskKind::Taq, split.vocabulary.clone());
        for mode in [EvalMode::TrainSetTest, EvalMode::TestSetTest, EvalMode::Inference] {
            let r = evaluate(&model, &split, mode);
            assert_eq!(r.n_samples, 40);
            for v in [r.task_accuracy, r.selector_accuracy.op, r.selector_accuracy.col, r.selector_accuracy.arg, r.violation_rate]
            {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn evaluation_does_not_mutate_parameters() {
        let split = tiny_split();
        let model = tiny_model(TaskKind::Taq, split.vocabulary.clone());
        let before = model.params.value_bytes();
        let _ = evaluate(&model, &split, EvalMode::Inference);
        let _ = evaluate(&model, &split, EvalMode::TestSetTest);
        assert_eq!(before, model.params.value_bytes());
    }

    #[test]
    fn evaluation_is_order_invariant() {
        let split = tiny_split();
        let model = tiny_model(TaskKind::Taq, split.vocabulary.clone());
        let a = evaluate(&model, &split, EvalMode::TestSetTest);
        let mut shuffled = split.clone();
        if let Samples::Taq(v) = &mut shuffled.samples {
            v.reverse();
        }
        let b = evaluate(&model, &shuffled, EvalMode::TestSetTest);
        assert_eq!(a.task_accuracy, b.task_accuracy);
        assert_eq!(a.selector_accuracy, b.selector_accuracy);
    }

    #[test]
    fn untrained_estilayer_exact_match_is_near_zero() {
        let split = tiny_split();
        let model = tiny_model(TaskKind::Taq, split.vocabulary.clone());
        let pairs = sample_api_io(crate::oracle::LogicOp::GreaterThan, 200, 25, (1, 100), 5);
        let acc = estilayer_accuracy(&model, crate::oracle::LogicOp::GreaterThan, &pairs);
        assert!(acc < 0.05, "untrained exact match over 25 rows should be ~0, got {acc}");
    }
}
