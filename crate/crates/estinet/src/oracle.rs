//! The external, non-differentiable applications: five logic functions behind
//! a typed API signature, plus the adaptation functions bridging hard selector
//! outputs to API inputs and API outputs back to the network.
//!
//! Everything here is pure and performs no gradient computation. Interface
//! violations (a hard selection that breaks the API contract) degrade to an
//! all-zero answer with a flag rather than aborting, so inference accuracy
//! stays measurable under imperfect selectors.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Table;

/// The five logic functions of the table QA API.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogicOp {
    EqualTo,
    LessThan,
    GreaterThan,
    Max,
    Min,
}

impl LogicOp {
    pub const ALL: [LogicOp; 5] = [
        LogicOp::EqualTo,
        LogicOp::LessThan,
        LogicOp::GreaterThan,
        LogicOp::Max,
        LogicOp::Min,
    ];

    /// Stable name used by configs, checkpoints, and the API registry.
    pub fn name(self) -> &'static str {
        match self {
            LogicOp::EqualTo => "equal_to",
            LogicOp::LessThan => "less_than",
            LogicOp::GreaterThan => "greater_than",
            LogicOp::Max => "max",
            LogicOp::Min => "min",
        }
    }

    pub fn from_name(name: &str) -> Option<LogicOp> {
        LogicOp::ALL.iter().copied().find(|op| op.name() == name)
    }

    /// Comparison ops consume the scalar argument; max/min ignore it.
    pub fn needs_argument(self) -> bool {
        matches!(self, LogicOp::EqualTo | LogicOp::LessThan | LogicOp::GreaterThan)
    }
}

/// Slot types of an application interface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotType {
    NumberVector,
    ScalarOrNan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputType {
    BinaryVector,
    Boolean,
}

/// Typed interface contract of a non-differentiable application.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiSignature {
    pub input_slots: Vec<SlotType>,
    pub output_type: OutputType,
}

impl ApiSignature {
    /// Table QA: a column of numbers plus a scalar-or-NaN argument, answering
    /// with one binary vector the size of the column.
    pub fn taq() -> Self {
        Self {
            input_slots: vec![SlotType::NumberVector, SlotType::ScalarOrNan],
            output_type: OutputType::BinaryVector,
        }
    }

    /// Two-number comparison: two scalars, boolean answer. Executed as a
    /// length-1 column so the same logic functions serve both tasks.
    pub fn lwp() -> Self {
        Self {
            input_slots: vec![SlotType::ScalarOrNan, SlotType::ScalarOrNan],
            output_type: OutputType::Boolean,
        }
    }
}

/// A concrete call: operation, column values, scalar argument (NaN when the
/// argument is not relevant or could not be parsed).
#[derive(Debug, Clone, PartialEq)]
pub struct ApiCall {
    pub op: LogicOp,
    pub column: Vec<f32>,
    pub argument: f32,
}

/// Result of executing a call: the row indicator plus a violation flag for
/// calls that broke the interface contract (comparison with a NaN argument).
#[derive(Debug, Clone, PartialEq)]
pub struct ApiResponse {
    pub indicator: Vec<bool>,
    pub violation: bool,
}

/// Applies one logic function to a column. Position `i` of the output is set
/// iff `column[i]` satisfies the predicate; ties in max/min mark every
/// extremal position. A comparison op called with a NaN argument is an
/// interface violation and yields an all-zero indicator with the flag set.
/// NaN cells never satisfy a predicate and are never extremal.
pub fn apply_logic_op(op: LogicOp, column: &[f32], arg: f32) -> ApiResponse {
    let n = column.len();
    if op.needs_argument() && arg.is_nan() {
        return ApiResponse { indicator: vec![false; n], violation: true };
    }
    let indicator = match op {
        LogicOp::EqualTo => column.iter().map(|&v| v == arg).collect(),
        LogicOp::LessThan => column.iter().map(|&v| v < arg).collect(),
        LogicOp::GreaterThan => column.iter().map(|&v| v > arg).collect(),
        LogicOp::Max => {
            let best = column.iter().copied().filter(|v| !v.is_nan()).fold(f32::NEG_INFINITY, f32::max);
            if best == f32::NEG_INFINITY {
                vec![false; n]
            } else {
                column.iter().map(|&v| v == best).collect()
            }
        }
        LogicOp::Min => {
            let best = column.iter().copied().filter(|v| !v.is_nan()).fold(f32::INFINITY, f32::min);
            if best == f32::INFINITY {
                vec![false; n]
            } else {
                column.iter().map(|&v| v == best).collect()
            }
        }
    };
    ApiResponse { indicator, violation: false }
}

/// Executes a prepared call.
pub fn execute(call: &ApiCall) -> ApiResponse {
    apply_logic_op(call.op, &call.column, call.argument)
}

/// Hard selector outputs as indices: operation, table column, argument token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HardSelections {
    pub op: usize,
    pub column: usize,
    pub argument: usize,
}

/// A call assembled from hard selections plus the violation state detected
/// during adaptation (before execution).
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedCall {
    pub call: ApiCall,
    pub violation: bool,
}

fn parse_numeric_token(token: &str) -> f32 {
    token.parse::<f32>().unwrap_or(f32::NAN)
}

/// Adapts hard selections to a table-QA call: the op index picks from `ops`,
/// the column index picks the raw numbers of that table column, and the
/// argument is the numeric parse of the selected question token (NaN when the
/// token is not numeric). Selecting the entity column is an interface
/// violation; the call proceeds with a NaN column and yields all zeros.
pub fn adapt_selection_to_api(
    sel: &HardSelections,
    ops: &[LogicOp],
    question_tokens: &[String],
    table: &Table,
) -> AdaptedCall {
    let op = ops[sel.op];
    let n_rows = table.name_column.len();
    let (column, mut violation) = if sel.column == 0 {
        // entity column: names parse as NaN
        (vec![f32::NAN; n_rows], true)
    } else {
        (table.value_columns[sel.column - 1].clone(), false)
    };
    let argument = question_tokens
        .get(sel.argument)
        .map(|t| parse_numeric_token(t))
        .unwrap_or(f32::NAN);
    if op.needs_argument() && argument.is_nan() {
        violation = true;
    }
    AdaptedCall { call: ApiCall { op, column, argument }, violation }
}

/// Adapts hard selections to a two-number comparison call: both slots are
/// numeric parses of question tokens; the first becomes a length-1 column and
/// the second the scalar argument. A non-numeric token in either slot is a
/// violation.
pub fn adapt_lwp_selection(
    sel: &HardSelections,
    ops: &[LogicOp],
    question_tokens: &[String],
) -> AdaptedCall {
    let op = ops[sel.op];
    let first = question_tokens
        .get(sel.column)
        .map(|t| parse_numeric_token(t))
        .unwrap_or(f32::NAN);
    let second = question_tokens
        .get(sel.argument)
        .map(|t| parse_numeric_token(t))
        .unwrap_or(f32::NAN);
    let violation = first.is_nan() || (op.needs_argument() && second.is_nan());
    AdaptedCall { call: ApiCall { op, column: vec![first], argument: second }, violation }
}

/// Joins a binary row indicator with the table's name column to produce the
/// answer entities.
pub fn adapt_api_output_to_network(indicator: &[bool], table: &Table) -> Result<Vec<String>, String> {
    if indicator.len() != table.name_column.len() {
        return Err(format!(
            "indicator length {} does not match table rows {}",
            indicator.len(),
            table.name_column.len()
        ));
    }
    Ok(table
        .name_column
        .iter()
        .zip(indicator)
        .filter(|(_, &on)| on)
        .map(|(name, _)| name.clone())
        .collect())
}

/// One input/output pair for estimator pretraining.
#[derive(Debug, Clone, PartialEq)]
pub struct IoPair {
    pub column: Vec<f32>,
    pub argument: f32,
    pub output: Vec<bool>,
}

/// Samples application input and records its output. Columns are i.i.d.
/// uniform integers in the value range. For comparison ops the argument is
/// drawn from the column with probability 0.5 (so equal-to has positive
/// examples) and uniformly otherwise; for max/min the argument is NaN with
/// probability 0.5 and uniform otherwise, since those ops ignore it.
pub fn sample_api_io(
    op: LogicOp,
    count: usize,
    rows: usize,
    value_range: (i64, i64),
    seed: u64,
) -> Vec<IoPair> {
    let (lo, hi) = value_range;
    assert!(lo < hi, "empty value range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x0a11_0000 ^ op as u64);
    (0..count)
        .map(|_| {
            let column: Vec<f32> = (0..rows).map(|_| rng.gen_range(lo..=hi) as f32).collect();
            let argument = if op.needs_argument() {
                if rng.gen_bool(0.5) {
                    column[rng.gen_range(0..rows)]
                } else {
                    rng.gen_range(lo..=hi) as f32
                }
            } else if rng.gen_bool(0.5) {
                f32::NAN
            } else {
                rng.gen_range(lo..=hi) as f32
            };
            let output = apply_logic_op(op, &column, argument).indicator;
            IoPair { column, argument, output }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greater_than_basic() {
        // brute force from the predicate definition: 3>4 F, 8>4 T, 5>4 T
        let r = apply_logic_op(LogicOp::GreaterThan, &[3.0, 8.0, 5.0], 4.0);
        assert_eq!(r.indicator, vec![false, true, true]);
        assert!(!r.violation);
    }

    #[test]
    fn brute_force_equivalence_exhaustive() {
        // all integer vectors of length <= 4 with entries in [0,5], all
        // integer args in [0,5], checked against direct per-element predicates
        fn check(col: &[f32], arg: f32) {
            let eq: Vec<bool> = col.iter().map(|&v| v == arg).collect();
            let lt: Vec<bool> = col.iter().map(|&v| v < arg).collect();
            let gt: Vec<bool> = col.iter().map(|&v| v > arg).collect();
            assert_eq!(apply_logic_op(LogicOp::EqualTo, col, arg).indicator, eq);
            assert_eq!(apply_logic_op(LogicOp::LessThan, col, arg).indicator, lt);
            assert_eq!(apply_logic_op(LogicOp::GreaterThan, col, arg).indicator, gt);
            let hi = col.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lo = col.iter().copied().fold(f32::INFINITY, f32::min);
            let mx: Vec<bool> = col.iter().map(|&v| v == hi).collect();
            let mn: Vec<bool> = col.iter().map(|&v| v == lo).collect();
            assert_eq!(apply_logic_op(LogicOp::Max, col, arg).indicator, mx);
            assert_eq!(apply_logic_op(LogicOp::Min, col, arg).indicator, mn);
        }
        for len in 1..=4usize {
            let mut idx = vec![0u8; len];
            loop {
                let col: Vec<f32> = idx.iter().map(|&v| v as f32).collect();
                for arg in 0..=5 {
                    check(&col, arg as f32);
                }
                // odometer over [0,5]^len
                let mut k = 0;
                loop {
                    if k == len {
                        break;
                    }
                    idx[k] += 1;
                    if idx[k] <= 5 {
                        break;
                    }
                    idx[k] = 0;
                    k += 1;
                }
                if k == len {
                    break;
                }
            }
        }
    }

    #[test]
    fn worked_example_more_than_seven() {
        let gold = [9.0, 7.0, 12.0, 3.0, 8.0];
        let r = apply_logic_op(LogicOp::GreaterThan, &gold, 7.0);
        assert_eq!(r.indicator, vec![true, false, true, false, true]);
    }

    #[test]
    fn max_marks_all_ties() {
        let r = apply_logic_op(LogicOp::Max, &[2.0, 9.0, 9.0], f32::NAN);
        assert_eq!(r.indicator, vec![false, true, true]);
        assert!(!r.violation);
    }

    #[test]
    fn max_min_exhaustive_small_vectors() {
        // exhaustive over all 3-element integer vectors with entries in [0,9]
        for a in 0..10i32 {
            for b in 0..10i32 {
                for c in 0..10i32 {
                    let col = [a as f32, b as f32, c as f32];
                    let hi = a.max(b).max(c);
                    let lo = a.min(b).min(c);
                    let want_max: Vec<bool> = [a, b, c].iter().map(|&v| v == hi).collect();
                    let want_min: Vec<bool> = [a, b, c].iter().map(|&v| v == lo).collect();
                    assert_eq!(apply_logic_op(LogicOp::Max, &col, f32::NAN).indicator, want_max);
                    assert_eq!(apply_logic_op(LogicOp::Min, &col, f32::NAN).indicator, want_min);
                }
            }
        }
    }

    #[test]
    fn max_min_ignore_argument() {
        let col = [4.0, 1.0, 7.0, 7.0];
        for arg in [f32::NAN, 0.0, 100.0, -3.0] {
            assert_eq!(
                apply_logic_op(LogicOp::Max, &col, arg).indicator,
                vec![false, false, true, true]
            );
            assert_eq!(
                apply_logic_op(LogicOp::Min, &col, arg).indicator,
                vec![false, true, false, false]
            );
        }
    }

    #[test]
    fn comparison_with_nan_argument_is_violation() {
        for op in [LogicOp::EqualTo, LogicOp::LessThan, LogicOp::GreaterThan] {
            let r = apply_logic_op(op, &[1.0, 2.0], f32::NAN);
            assert!(r.violation);
            assert_eq!(r.indicator, vec![false, false]);
        }
    }

    #[test]
    fn nan_cells_never_satisfy_or_win() {
        let col = [f32::NAN, 2.0, f32::NAN];
        assert_eq!(apply_logic_op(LogicOp::GreaterThan, &col, 1.0).indicator, vec![false, true, false]);
        assert_eq!(apply_logic_op(LogicOp::Max, &col, f32::NAN).indicator, vec![false, true, false]);
        let all_nan = [f32::NAN, f32::NAN];
        assert_eq!(apply_logic_op(LogicOp::Max, &all_nan, f32::NAN).indicator, vec![false, false]);
    }

    #[test]
    fn signatures() {
        assert_eq!(ApiSignature::taq().input_slots, vec![SlotType::NumberVector, SlotType::ScalarOrNan]);
        assert_eq!(ApiSignature::taq().output_type, OutputType::BinaryVector);
        assert_eq!(ApiSignature::lwp().input_slots, vec![SlotType::ScalarOrNan, SlotType::ScalarOrNan]);
        assert_eq!(ApiSignature::lwp().output_type, OutputType::Boolean);
    }

    #[test]
    fn registry_names_round_trip() {
        for op in LogicOp::ALL {
            assert_eq!(LogicOp::from_name(op.name()), Some(op));
        }
        assert_eq!(LogicOp::from_name("median"), None);
    }

    #[test]
    fn sample_api_io_outputs_match_oracle() {
        for op in LogicOp::ALL {
            let pairs = sample_api_io(op, 200, 25, (1, 100), 42);
            assert_eq!(pairs.len(), 200);
            for p in &pairs {
                assert_eq!(apply_logic_op(op, &p.column, p.argument).indicator, p.output);
                assert!(p.column.iter().all(|&v| (1.0..=100.0).contains(&v)));
            }
        }
    }

    #[test]
    fn sample_api_io_equal_to_has_positive_examples() {
        let pairs = sample_api_io(LogicOp::EqualTo, 500, 25, (1, 100), 7);
        let with_hits = pairs.iter().filter(|p| p.output.iter().any(|&b| b)).count();
        assert!(with_hits > 150, "only {with_hits} of 500 equal-to pairs had positives");
    }

    #[test]
    fn sample_api_io_deterministic() {
        let a = sample_api_io(LogicOp::LessThan, 50, 10, (1, 100), 9);
        let b = sample_api_io(LogicOp::LessThan, 50, 10, (1, 100), 9);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.column, y.column);
            assert!(x.argument == y.argument || (x.argument.is_nan() && y.argument.is_nan()));
            assert_eq!(x.output, y.output);
        }
    }
}
