//! Synthetic dataset generation for the two tasks, with gold intermediate
//! labels for the selectors and gold task answers, plus persistent file
//! formats.
//!
//! TAQ: questions over generated tables (5 columns x 25 rows by default),
//! answered by applying one logic function to one column. LWP: two-number
//! comparison questions from ten templates. Generators are pure functions of
//! (config, seed).

mod files;
mod lwp;
mod taq;

pub use files::{read_dataset, sha256_hex_file, write_dataset};
pub use lwp::{generate_lwp_dataset, generate_lwp_split, lwp_gold_selection, lwp_templates, LwpTemplate, LWP_OPS};
pub use taq::{
    column_name_pool, entity_pool, generate_taq_questions, generate_taq_split, generate_taq_tables,
    taq_templates, TaqGenConfig, TaqTemplate, TAQ_OPS,
};

use std::collections::BTreeSet;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::LogicOp;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("generation error: {0}")]
    Generation(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} line {line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

/// A generated table: entity names in the first column, numeric value
/// columns after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub id: u32,
    /// Word used for these entities in questions ("country", "club").
    pub entity_kind: String,
    /// One name per column; index 0 names the entity column.
    pub column_names: Vec<String>,
    pub name_column: Vec<String>,
    /// `column_names.len() - 1` columns of `name_column.len()` numbers each.
    pub value_columns: Vec<Vec<f32>>,
}

impl Table {
    pub fn n_rows(&self) -> usize {
        self.name_column.len()
    }

    pub fn n_cols(&self) -> usize {
        self.column_names.len()
    }
}

/// A table question with gold labels for every selector and the task answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaSample {
    pub question_tokens: Vec<String>,
    pub table_id: u32,
    pub gold_op: LogicOp,
    /// Absolute column index into the table (value columns start at 1).
    pub gold_column: usize,
    /// Question token position of the numeric argument; `None` for max/min.
    pub gold_arg_token: Option<usize>,
    pub gold_rows: Vec<bool>,
    pub gold_answer: Vec<String>,
}

/// A two-number comparison question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LwpSample {
    pub template_id: usize,
    pub question_tokens: Vec<String>,
    pub x_value: f32,
    pub y_value: f32,
    pub gold_label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Taq,
    Lwp,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Taq => "taq",
            TaskKind::Lwp => "lwp",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "taq" => Some(TaskKind::Taq),
            "lwp" => Some(TaskKind::Lwp),
            _ => None,
        }
    }

    /// The operation registry the task's model selects over.
    pub fn ops(self) -> &'static [LogicOp] {
        match self {
            TaskKind::Taq => &TAQ_OPS,
            TaskKind::Lwp => &LWP_OPS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Test,
}

impl SplitKind {
    pub fn name(self) -> &'static str {
        match self {
            SplitKind::Train => "train",
            SplitKind::Test => "test",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "train" => Some(SplitKind::Train),
            "test" => Some(SplitKind::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Samples {
    Taq(Vec<QaSample>),
    Lwp(Vec<LwpSample>),
}

impl Samples {
    pub fn len(&self) -> usize {
        match self {
            Samples::Taq(v) => v.len(),
            Samples::Lwp(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_taq(&self) -> Option<&[QaSample]> {
        match self {
            Samples::Taq(v) => Some(v),
            Samples::Lwp(_) => None,
        }
    }

    pub fn as_lwp(&self) -> Option<&[LwpSample]> {
        match self {
            Samples::Lwp(v) => Some(v),
            Samples::Taq(_) => None,
        }
    }
}

/// Reserved id for out-of-vocabulary pieces.
pub const UNK_ID: usize = 0;
/// Reserved id for batch padding positions.
pub const PAD_ID: usize = 1;

/// Ordered set of word pieces. Ids 0 and 1 are reserved for `[unk]` and
/// `[pad]`; real pieces follow in sorted order so the mapping is a pure
/// function of the piece set.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_pieces<I: IntoIterator<Item = String>>(iter: I) -> Self {
        let set: BTreeSet<String> = iter.into_iter().collect();
        let mut pieces = vec!["[unk]".to_string(), "[pad]".to_string()];
        pieces.extend(set);
        let index = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
        Self { pieces, index }
    }

    pub fn id(&self, piece: &str) -> usize {
        self.index.get(piece).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, piece: &str) -> bool {
        self.index.contains_key(piece)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.len() <= 2
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }
}

/// One split of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub task: TaskKind,
    pub split: SplitKind,
    pub seed: u64,
    pub samples: Samples,
    pub tables: Vec<Table>,
    pub vocabulary: Vocabulary,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn table_by_id(&self, id: u32) -> Option<&Table> {
        self.tables.iter().find(|t| t.id == id)
    }
}

/// True when a token is routed through the number codec instead of the word
/// embedding table.
pub fn is_numeric_token(token: &str) -> bool {
    token.parse::<f32>().map(|v| v.is_finite()).unwrap_or(false)
}

/// Collects the word-piece vocabulary of a sample corpus: every non-numeric
/// question token plus the words of table column names and entity names.
/// Numbers are excluded; they are encoded by the codec.
pub fn build_vocabulary(samples: &Samples, tables: &[Table]) -> Vocabulary {
    fn push_words(pieces: &mut Vec<String>, text: &str) {
        for w in text.split_whitespace() {
            if !is_numeric_token(w) {
                pieces.push(w.to_string());
            }
        }
    }
    let mut pieces: Vec<String> = Vec::new();
    match samples {
        Samples::Taq(v) => {
            for s in v {
                for t in &s.question_tokens {
                    if !is_numeric_token(t) {
                        pieces.push(t.clone());
                    }
                }
            }
        }
        Samples::Lwp(v) => {
            for s in v {
                for t in &s.question_tokens {
                    if !is_numeric_token(t) {
                        pieces.push(t.clone());
                    }
                }
            }
        }
    }
    for table in tables {
        for name in &table.column_names {
            push_words(&mut pieces, name);
        }
        for entity in &table.name_column {
            push_words(&mut pieces, entity);
        }
        push_words(&mut pieces, &table.entity_kind);
    }
    Vocabulary::from_pieces(pieces)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_corpus_gives_empty_vocabulary() {
        let v = build_vocabulary(&Samples::Taq(vec![]), &[]);
        assert!(v.is_empty());
        assert_eq!(v.len(), 2); // reserved pieces only
    }

    #[test]
    fn vocabulary_is_stable_and_ordered() {
        let words = ["beta", "alpha", "beta", "gamma"];
        let a = Vocabulary::from_pieces(words.iter().map(|s| s.to_string()));
        let b = Vocabulary::from_pieces(words.iter().rev().map(|s| s.to_string()));
        assert_eq!(a, b);
        assert_eq!(a.pieces(), &["[unk]", "[pad]", "alpha", "beta", "gamma"]);
        assert_eq!(a.id("alpha"), 2);
        assert_eq!(a.id("missing"), UNK_ID);
    }

    #[test]
    fn numeric_tokens_detected() {
        assert!(is_numeric_token("7"));
        assert!(is_numeric_token("-12.5"));
        assert!(is_numeric_token("300"));
        assert!(!is_numeric_token("seven"));
        assert!(!is_numeric_token("medals"));
        assert!(!is_numeric_token("nan"));
        assert!(!is_numeric_token("inf"));
    }
}
