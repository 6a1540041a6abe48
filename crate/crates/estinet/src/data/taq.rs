//! Table and question generation for the table-QA task.
//!
//! Entities come from a closed list shipped with the crate; numeric cells are
//! i.i.d. uniform integers in the split's value range (train and test ranges
//! are disjoint). Questions are rendered from per-op surface templates and
//! carry gold labels for every selector plus the gold answer, computed with
//! the same logic functions the external API executes.

use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{build_vocabulary, DataError, DatasetSplit, QaSample, Samples, SplitKind, Table, TaskKind};
use crate::oracle::{apply_logic_op, LogicOp};

/// Operation registry of the table-QA API.
pub const TAQ_OPS: [LogicOp; 5] = LogicOp::ALL;

const ENTITIES_TXT: &str = include_str!("../../data/entities.txt");
const COLUMN_NAMES_TXT: &str = include_str!("../../data/column_names.txt");
const TAQ_TEMPLATES_TXT: &str = include_str!("../../data/taq_templates.txt");

/// Entity kinds paired with (singular, plural) surface words. Countries fill
/// the first part of the entity file, clubs the rest.
const ENTITY_KINDS: [(&str, &str); 2] = [("country", "countries"), ("club", "clubs")];
const N_COUNTRIES: usize = 150;

/// Closed entity list (single lowercase tokens, one per line).
pub fn entity_pool() -> &'static [String] {
    static POOL: OnceLock<Vec<String>> = OnceLock::new();
    POOL.get_or_init(|| {
        ENTITIES_TXT
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect()
    })
}

/// Closed pool of quantitative column names.
pub fn column_name_pool() -> &'static [String] {
    static POOL: OnceLock<Vec<String>> = OnceLock::new();
    POOL.get_or_init(|| {
        COLUMN_NAMES_TXT
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect()
    })
}

/// One question surface form for one logic op.
#[derive(Debug, Clone, PartialEq)]
pub struct TaqTemplate {
    pub op: LogicOp,
    pub text: String,
}

/// Templates loaded from the crate's data file: `op|text`, with `{ent}`,
/// `{ents}`, `{col}`, `{arg}` placeholders.
pub fn taq_templates() -> &'static [TaqTemplate] {
    static TEMPLATES: OnceLock<Vec<TaqTemplate>> = OnceLock::new();
    TEMPLATES.get_or_init(|| {
        TAQ_TEMPLATES_TXT
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|line| {
                let (op, text) = line.split_once('|').expect("template line: op|text");
                TaqTemplate {
                    op: LogicOp::from_name(op).expect("known op name"),
                    text: text.to_string(),
                }
            })
            .collect()
    })
}

fn entity_slice(kind_idx: usize) -> &'static [String] {
    let pool = entity_pool();
    match kind_idx {
        0 => &pool[..N_COUNTRIES],
        _ => &pool[N_COUNTRIES..],
    }
}

/// Generates `count` tables of `rows` x `cols` cells. Entity names are
/// sampled without replacement per table from the closed list; numeric cells
/// are i.i.d. uniform integers in `value_range`.
pub fn generate_taq_tables(
    count: usize,
    rows: usize,
    cols: usize,
    value_range: (i64, i64),
    seed: u64,
) -> Result<Vec<Table>, DataError> {
    let (lo, hi) = value_range;
    if lo >= hi {
        return Err(DataError::Generation(format!("empty value range [{lo}, {hi}]")));
    }
    if count == 0 {
        return Err(DataError::Generation("table count must be positive".into()));
    }
    if cols < 2 {
        return Err(DataError::Generation("need at least one value column".into()));
    }
    let min_pool = ENTITY_KINDS.iter().enumerate().map(|(i, _)| entity_slice(i).len()).min().unwrap();
    if rows > min_pool {
        return Err(DataError::Generation(format!(
            "{rows} rows exceed the closed entity list ({min_pool} names per kind)"
        )));
    }
    if cols - 1 > column_name_pool().len() {
        return Err(DataError::Generation(format!(
            "{} value columns exceed the column-name pool ({})",
            cols - 1,
            column_name_pool().len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ab1_e5);
    let mut tables = Vec::with_capacity(count);
    for id in 0..count {
        let kind_idx = rng.gen_range(0..ENTITY_KINDS.len());
        let (kind, _) = ENTITY_KINDS[kind_idx];
        let mut names: Vec<String> = entity_slice(kind_idx).to_vec();
        names.shuffle(&mut rng);
        names.truncate(rows);
        let mut value_names: Vec<String> = column_name_pool().to_vec();
        value_names.shuffle(&mut rng);
        value_names.truncate(cols - 1);
        let mut column_names = vec![kind.to_string()];
        column_names.extend(value_names);
        let value_columns: Vec<Vec<f32>> = (0..cols - 1)
            .map(|_| (0..rows).map(|_| rng.gen_range(lo..=hi) as f32).collect())
            .collect();
        tables.push(Table {
            id: id as u32,
            entity_kind: kind.to_string(),
            column_names,
            name_column: names,
            value_columns,
        });
    }
    Ok(tables)
}

fn plural_of(kind: &str) -> &'static str {
    ENTITY_KINDS
        .iter()
        .find(|(s, _)| *s == kind)
        .map(|(_, p)| *p)
        .unwrap_or("entities")
}

/// Renders a template into tokens, returning the position of the `{arg}`
/// token when present.
fn render_template(
    template: &TaqTemplate,
    table: &Table,
    column: usize,
    arg: Option<i64>,
) -> (Vec<String>, Option<usize>) {
    let mut tokens = Vec::new();
    let mut arg_pos = None;
    for word in template.text.split_whitespace() {
        match word {
            "{ent}" => tokens.push(table.entity_kind.clone()),
            "{ents}" => tokens.push(plural_of(&table.entity_kind).to_string()),
            "{col}" => {
                for w in table.column_names[column].split_whitespace() {
                    tokens.push(w.to_string());
                }
            }
            "{arg}" => {
                arg_pos = Some(tokens.len());
                tokens.push(arg.expect("template has {arg} but no argument drawn").to_string());
            }
            w => tokens.push(w.to_string()),
        }
    }
    (tokens, arg_pos)
}

/// Columns whose extremum for `op` is unique, so max/min answers do not
/// depend on the tie policy.
fn untied_columns(table: &Table, op: LogicOp) -> Vec<usize> {
    (1..table.n_cols())
        .filter(|&c| {
            let col = &table.value_columns[c - 1];
            let best = col.iter().copied().fold(
                if op == LogicOp::Max { f32::NEG_INFINITY } else { f32::INFINITY },
                if op == LogicOp::Max { f32::max } else { f32::min },
            );
            col.iter().filter(|&&v| v == best).count() == 1
        })
        .collect()
}

/// Generates `count` questions over the given tables. Ops are drawn
/// uniformly; comparison arguments come from the selected column with
/// probability 0.5 and uniformly from the column's observed range otherwise.
/// Every sample satisfies the dataset self-consistency invariant:
/// `gold_rows = apply_logic_op(gold_op, column, argument)`.
pub fn generate_taq_questions(tables: &[Table], count: usize, seed: u64) -> Vec<QaSample> {
    assert!(!tables.is_empty(), "no tables to ask about");
    let templates = taq_templates();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e57_10);
    let mut samples = Vec::with_capacity(count);
    while samples.len() < count {
        let table = &tables[rng.gen_range(0..tables.len())];
        let op = TAQ_OPS[rng.gen_range(0..TAQ_OPS.len())];
        let column = if op.needs_argument() {
            rng.gen_range(1..table.n_cols())
        } else {
            let candidates = untied_columns(table, op);
            if candidates.is_empty() {
                continue; // all columns tied for this op; redraw
            }
            candidates[rng.gen_range(0..candidates.len())]
        };
        let values = &table.value_columns[column - 1];
        let arg: Option<i64> = if op.needs_argument() {
            Some(if rng.gen_bool(0.5) {
                values[rng.gen_range(0..values.len())] as i64
            } else {
                let lo = values.iter().copied().fold(f32::INFINITY, f32::min) as i64;
                let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max) as i64;
                rng.gen_range(lo..=hi)
            })
        } else {
            None
        };
        let candidates: Vec<&TaqTemplate> = templates.iter().filter(|t| t.op == op).collect();
        let template = candidates[rng.gen_range(0..candidates.len())];
        let (question_tokens, gold_arg_token) = render_template(template, table, column, arg);
        let arg_value = arg.map(|a| a as f32).unwrap_or(f32::NAN);
        let gold_rows = apply_logic_op(op, values, arg_value).indicator;
        let gold_answer = table
            .name_column
            .iter()
            .zip(&gold_rows)
            .filter(|(_, &on)| on)
            .map(|(n, _)| n.clone())
            .collect();
        samples.push(QaSample {
            question_tokens,
            table_id: table.id,
            gold_op: op,
            gold_column: column,
            gold_arg_token,
            gold_rows,
            gold_answer,
        });
    }
    samples
}

/// Configuration for one TAQ split.
#[derive(Debug, Clone, Copy)]
pub struct TaqGenConfig {
    pub n_questions: usize,
    /// 0 means one table per 25 questions (at least one).
    pub n_tables: usize,
    pub rows: usize,
    pub cols: usize,
    pub value_range: (i64, i64),
    pub seed: u64,
}

impl TaqGenConfig {
    pub fn train_default(seed: u64) -> Self {
        Self { n_questions: 20_000, n_tables: 0, rows: 25, cols: 5, value_range: (1, 100), seed }
    }

    pub fn test_default(seed: u64) -> Self {
        Self { n_questions: 4_000, n_tables: 0, rows: 25, cols: 5, value_range: (300, 400), seed }
    }

    fn tables_or_default(&self) -> usize {
        if self.n_tables > 0 {
            self.n_tables
        } else {
            (self.n_questions / 25).max(1)
        }
    }
}

/// Generates a full TAQ split: tables, questions, and vocabulary.
pub fn generate_taq_split(cfg: &TaqGenConfig, split: SplitKind) -> Result<DatasetSplit, DataError> {
    let tables = generate_taq_tables(cfg.tables_or_default(), cfg.rows, cfg.cols, cfg.value_range, cfg.seed)?;
    let samples = Samples::Taq(generate_taq_questions(&tables, cfg.n_questions, cfg.seed));
    let vocabulary = build_vocabulary(&samples, &tables);
    Ok(DatasetSplit { task: TaskKind::Taq, split, seed: cfg.seed, samples, tables, vocabulary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::is_numeric_token;

    #[test]
    fn pools_are_large_enough() {
        assert!(entity_pool().len() >= 200, "entity pool has {}", entity_pool().len());
        assert!(entity_slice(0).len() >= 25);
        assert!(entity_slice(1).len() >= 25);
        assert!(column_name_pool().len() >= 4);
        // single-token entities, no numerics
        for e in entity_pool() {
            assert!(!e.contains(' '));
            assert!(!is_numeric_token(e), "entity {e} parses as a number");
        }
    }

    #[test]
    fn templates_cover_all_ops() {
        for op in TAQ_OPS {
            let n = taq_templates().iter().filter(|t| t.op == op).count();
            assert!(n >= 2, "{} has {n} templates", op.name());
        }
    }

    #[test]
    fn tables_respect_range_and_shape() {
        let tables = generate_taq_tables(3, 25, 5, (1, 100), 7).unwrap();
        assert_eq!(tables.len(), 3);
        for t in &tables {
            assert_eq!(t.n_rows(), 25);
            assert_eq!(t.n_cols(), 5);
            assert_eq!(t.value_columns.len(), 4);
            for col in &t.value_columns {
                assert!(col.iter().all(|&v| (1.0..=100.0).contains(&v) && v.fract() == 0.0));
            }
            // entities unique within a table
            let mut names = t.name_column.clone();
            names.sort();
            names.dedup();
            assert_eq!(names.len(), 25);
        }
    }

    #[test]
    fn test_range_has_no_low_values() {
        let tables = generate_taq_tables(2, 25, 5, (300, 400), 3).unwrap();
        for t in &tables {
            for col in &t.value_columns {
                assert!(col.iter().all(|&v| v >= 300.0));
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_taq_tables(2, 25, 5, (1, 100), 11).unwrap();
        let b = generate_taq_tables(2, 25, 5, (1, 100), 11).unwrap();
        assert_eq!(a, b);
        let qa = generate_taq_questions(&a, 50, 13);
        let qb = generate_taq_questions(&b, 50, 13);
        assert_eq!(qa, qb);
    }

    #[test]
    fn oversized_rows_rejected() {
        assert!(generate_taq_tables(1, 10_000, 5, (1, 100), 0).is_err());
    }

    #[test]
    fn questions_are_self_consistent() {
        let tables = generate_taq_tables(4, 25, 5, (1, 100), 5).unwrap();
        let samples = generate_taq_questions(&tables, 300, 6);
        assert_eq!(samples.len(), 300);
        let mut ops_seen = std::collections::BTreeSet::new();
        for s in &samples {
            ops_seen.insert(s.gold_op);
            let table = tables.iter().find(|t| t.id == s.table_id).unwrap();
            let values = &table.value_columns[s.gold_column - 1];
            let arg = match s.gold_arg_token {
                Some(i) => s.question_tokens[i].parse::<f32>().unwrap(),
                None => f32::NAN,
            };
            assert_eq!(apply_logic_op(s.gold_op, values, arg).indicator, s.gold_rows);
            let expected_answer: Vec<String> = table
                .name_column
                .iter()
                .zip(&s.gold_rows)
                .filter(|(_, &on)| on)
                .map(|(n, _)| n.clone())
                .collect();
            assert_eq!(expected_answer, s.gold_answer);
            if s.gold_op.needs_argument() {
                assert!(s.gold_arg_token.is_some());
            } else {
                assert!(s.gold_arg_token.is_none());
                // unique extremum: exactly one gold row
                assert_eq!(s.gold_rows.iter().filter(|&&b| b).count(), 1);
            }
        }
        assert_eq!(ops_seen.len(), 5, "all five ops should appear in 300 draws");
    }

    #[test]
    fn split_vocabulary_covers_question_words() {
        let cfg = TaqGenConfig { n_questions: 100, n_tables: 2, rows: 25, cols: 5, value_range: (1, 100), seed: 1 };
        let split = generate_taq_split(&cfg, SplitKind::Train).unwrap();
        if let Samples::Taq(samples) = &split.samples {
            for s in samples {
                for t in &s.question_tokens {
                    if !is_numeric_token(t) {
                        assert!(split.vocabulary.contains(t), "missing piece {t}");
                    }
                }
            }
        }
    }
}
