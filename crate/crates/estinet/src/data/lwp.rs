//! Two-number comparison questions ("less-with-more" data study task).
//!
//! Ten templates over a pair of numbers sampled from a zero-mean normal with
//! variance 1e10 (standard deviation 1e5), rounded to single precision. Each
//! template asks one strict comparison; the label is computed analytically.

use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{build_vocabulary, DatasetSplit, LwpSample, Samples, SplitKind, TaskKind};
use crate::oracle::{HardSelections, LogicOp};

/// Operation registry of the comparison API.
pub const LWP_OPS: [LogicOp; 2] = [LogicOp::GreaterThan, LogicOp::LessThan];

const LWP_TEMPLATES_TXT: &str = include_str!("../../data/lwp_templates.txt");

/// One comparison template: the op it asks about, whether the number the
/// question is about is `{x}` (otherwise `{y}`), and the surface text.
#[derive(Debug, Clone, PartialEq)]
pub struct LwpTemplate {
    pub op: LogicOp,
    pub subject_is_x: bool,
    pub text: String,
}

impl LwpTemplate {
    /// The label the template asks for: `subject <op> other`.
    pub fn label(&self, x: f32, y: f32) -> bool {
        let (subject, other) = if self.subject_is_x { (x, y) } else { (y, x) };
        match self.op {
            LogicOp::GreaterThan => subject > other,
            LogicOp::LessThan => subject < other,
            _ => unreachable!("comparison templates only"),
        }
    }
}

/// The ten templates from the crate's data file: `op|xy-or-yx|text`.
pub fn lwp_templates() -> &'static [LwpTemplate] {
    static TEMPLATES: OnceLock<Vec<LwpTemplate>> = OnceLock::new();
    TEMPLATES.get_or_init(|| {
        let templates: Vec<LwpTemplate> = LWP_TEMPLATES_TXT
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|line| {
                let mut parts = line.splitn(3, '|');
                let op = LogicOp::from_name(parts.next().expect("op field")).expect("known op");
                let order = parts.next().expect("order field");
                let text = parts.next().expect("text field").to_string();
                LwpTemplate { op, subject_is_x: order == "xy", text }
            })
            .collect();
        assert_eq!(templates.len(), 10, "ten comparison templates");
        templates
    })
}

fn render(template: &LwpTemplate, x: f32, y: f32) -> (Vec<String>, usize, usize) {
    let mut tokens = Vec::new();
    let (mut x_pos, mut y_pos) = (usize::MAX, usize::MAX);
    for word in template.text.split_whitespace() {
        match word {
            "{x}" => {
                x_pos = tokens.len();
                tokens.push(format!("{x}"));
            }
            "{y}" => {
                y_pos = tokens.len();
                tokens.push(format!("{y}"));
            }
            w => tokens.push(w.to_string()),
        }
    }
    (tokens, x_pos, y_pos)
}

/// Generates `count` comparison samples. Values are N(0, 1e10) (variance
/// reading, i.e. std 1e5) rounded to f32; templates are drawn uniformly.
pub fn generate_lwp_dataset(count: usize, seed: u64) -> Vec<LwpSample> {
    let templates = lwp_templates();
    let normal = Normal::new(0.0f64, 1e5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1e55_da7a);
    (0..count)
        .map(|_| {
            let template_id = rng.gen_range(0..templates.len());
            let x = normal.sample(&mut rng) as f32;
            let y = normal.sample(&mut rng) as f32;
            let template = &templates[template_id];
            let (question_tokens, _, _) = render(template, x, y);
            LwpSample {
                template_id,
                question_tokens,
                x_value: x,
                y_value: y,
                gold_label: template.label(x, y),
            }
        })
        .collect()
}

/// Generates a full LWP split (no tables).
pub fn generate_lwp_split(count: usize, seed: u64, split: SplitKind) -> DatasetSplit {
    let samples = Samples::Lwp(generate_lwp_dataset(count, seed));
    let vocabulary = build_vocabulary(&samples, &[]);
    DatasetSplit { task: TaskKind::Lwp, split, seed, samples, tables: vec![], vocabulary }
}

/// Gold selector targets for a sample: op index into [`LWP_OPS`], the token
/// position filling the first API slot (the subject), and the token position
/// filling the scalar argument slot.
pub fn lwp_gold_selection(sample: &LwpSample) -> HardSelections {
    let template = &lwp_templates()[sample.template_id];
    let (_, x_pos, y_pos) = render(template, sample.x_value, sample.y_value);
    let op = LWP_OPS.iter().position(|&o| o == template.op).unwrap();
    let (subject, other) = if template.subject_is_x { (x_pos, y_pos) } else { (y_pos, x_pos) };
    HardSelections { op, column: subject, argument: other }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::is_numeric_token;

    #[test]
    fn ten_templates_with_both_ops() {
        let t = lwp_templates();
        assert_eq!(t.len(), 10);
        assert!(t.iter().any(|t| t.op == LogicOp::GreaterThan));
        assert!(t.iter().any(|t| t.op == LogicOp::LessThan));
    }

    #[test]
    fn first_bigger_template_label() {
        // "out of {x} and {y} is the first bigger" with x=5, y=2 is true
        let t = &lwp_templates()[0];
        assert_eq!(t.op, LogicOp::GreaterThan);
        assert!(t.subject_is_x);
        assert!(t.label(5.0, 2.0));
        assert!(!t.label(2.0, 5.0));
    }

    #[test]
    fn equal_values_make_bigger_false() {
        for t in lwp_templates() {
            assert!(!t.label(3.5, 3.5), "strict comparison must fail on ties: {}", t.text);
        }
    }

    #[test]
    fn dataset_shape_and_labels() {
        let samples = generate_lwp_dataset(250, 99);
        assert_eq!(samples.len(), 250);
        let trues = samples.iter().filter(|s| s.gold_label).count();
        let falses = samples.len() - trues;
        assert!(trues >= 100 && falses >= 100, "label balance {trues}/{falses}");
        for s in &samples {
            let template = &lwp_templates()[s.template_id];
            assert_eq!(s.gold_label, template.label(s.x_value, s.y_value));
            // exactly two numeric tokens, round-trippable
            let numerics: Vec<f32> = s
                .question_tokens
                .iter()
                .filter(|t| is_numeric_token(t))
                .map(|t| t.parse().unwrap())
                .collect();
            assert_eq!(numerics.len(), 2);
            assert!(numerics.contains(&s.x_value));
            assert!(numerics.contains(&s.y_value));
        }
    }

    #[test]
    fn gold_selection_reproduces_label() {
        use crate::oracle::{adapt_lwp_selection, execute};
        let samples = generate_lwp_dataset(200, 3);
        for s in &samples {
            let sel = lwp_gold_selection(s);
            let adapted = adapt_lwp_selection(&sel, &LWP_OPS, &s.question_tokens);
            assert!(!adapted.violation);
            let out = execute(&adapted.call);
            assert_eq!(out.indicator[0], s.gold_label);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate_lwp_dataset(40, 5), generate_lwp_dataset(40, 5));
        assert_ne!(generate_lwp_dataset(40, 5), generate_lwp_dataset(40, 6));
    }
}
