//! Command-line experiment runner: configuration, seeded repeats, metrics
//! persistence, and plot/table emission.
//!
//! Commands: `gen-data`, `pretrain`, `train`, `eval`, `experiment`, `plot`.
//! Precedence for settings: command-line flag > config file > preset
//! defaults. The output root can also be overridden with the
//! `ESTINET_OUT_ROOT` environment variable (a `--out` flag still wins).
//!
//! Exit codes: 0 success, 1 config error, 2 runtime failure, 3
//! threshold miss.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    generate_lwp_split, generate_taq_split, read_dataset, sha256_hex_file, write_dataset,
    DatasetSplit, SplitKind, TaqGenConfig, TaskKind,
};
use crate::eval::{evaluate, EvalMode};
use crate::metrics::{append_records, fmt_f, read_records, write_csv, MetricsRecord};
use crate::model::{load_checkpoint, save_checkpoint, EstiLayerConfig, EstiNet, EstiNetConfig};
use crate::plot::plot_run_panels;
use crate::train::{
    pretrain_all, run_training, EvalPlan, Hyperparams, PretrainParams, TrainError, TrainOutcome,
    TrainingProcedure,
};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
    #[error("threshold miss: {0}")]
    ThresholdMiss(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::ThresholdMiss(_) => 3,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Model(m) => CliError::Runtime(m.to_string()),
        }
    }
}

fn io_runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSettings {
    pub train_questions: usize,
    pub test_questions: usize,
    pub rows: usize,
    pub cols: usize,
    pub train_range: (i64, i64),
    pub test_range: (i64, i64),
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            train_questions: 20_000,
            test_questions: 4_000,
            rows: 25,
            cols: 5,
            train_range: (1, 100),
            test_range: (300, 400),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSettings {
    pub dim: usize,
    pub d_rnn: usize,
    pub esti: EstiLayerConfig,
    pub max_question_len: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self { dim: 128, d_rnn: 128, esti: EstiLayerConfig::default(), max_question_len: 24 }
    }
}

/// One experiment: task, procedures to compare, data/model/optimization
/// settings, and how many seeded repeats to average.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub version: u32,
    pub task: TaskKind,
    pub procedures: Vec<TrainingProcedure>,
    /// Train-set sizes to sweep (the less-data study); empty = use
    /// `data.train_questions`.
    pub train_sizes: Vec<usize>,
    pub data: DataSettings,
    pub model: ModelSettings,
    pub hp: Hyperparams,
    pub pretrain: PretrainParams,
    pub repeats: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Estimator-accuracy probe size per epoch (0 = skip).
    pub estilayer_probe: usize,
}

impl ExperimentConfig {
    /// Paper-scale table-QA experiment.
    pub fn taq_paper() -> Self {
        Self {
            version: CONFIG_VERSION,
            task: TaskKind::Taq,
            procedures: TrainingProcedure::ALL.to_vec(),
            train_sizes: Vec::new(),
            data: DataSettings::default(),
            model: ModelSettings::default(),
            hp: Hyperparams::default(),
            pretrain: PretrainParams::default(),
            repeats: 10,
            seed: 7,
            out_dir: PathBuf::from("estinet_out"),
            estilayer_probe: 200,
        }
    }

    /// Desk-scale table-QA experiment: 5,000/1,000 questions, 3 repeats,
    /// and a lighter estimator that still reaches the pretraining threshold.
    pub fn taq_desk() -> Self {
        let mut cfg = Self::taq_paper();
        cfg.data.train_questions = 5_000;
        cfg.data.test_questions = 1_000;
        cfg.model.esti = EstiLayerConfig { n_layers: 1, k_heads: 4, d_ff: 256 };
        cfg.pretrain = PretrainParams { n_pairs: 20_000, epochs: 8, ..PretrainParams::default() };
        cfg.hp.epochs = 60;
        cfg.hp.early_stop_train_acc = Some(0.97);
        cfg.repeats = 3;
        cfg
    }

    /// Desk-scale less-data study on the comparison task.
    pub fn lwp_desk() -> Self {
        let mut cfg = Self::taq_paper();
        cfg.task = TaskKind::Lwp;
        cfg.procedures = vec![TrainingProcedure::Plain, TrainingProcedure::Online];
        cfg.train_sizes = vec![250, 1_000, 10_000];
        cfg.data.test_questions = 1_000;
        cfg.model.esti = EstiLayerConfig { n_layers: 1, k_heads: 4, d_ff: 256 };
        cfg.hp.epochs = 60;
        cfg.hp.early_stop_train_acc = Some(0.99);
        cfg.repeats = 3;
        cfg.estilayer_probe = 0;
        cfg
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "taq-paper" => Some(Self::taq_paper()),
            "taq-desk" => Some(Self::taq_desk()),
            "lwp-desk" => Some(Self::lwp_desk()),
            _ => None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("bad config {}: {e}", path.display())))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(io_runtime)
    }

    pub fn model_cfg(&self) -> EstiNetConfig {
        let mut m = EstiNetConfig::new(self.task);
        m.dim = self.model.dim;
        m.d_rnn = self.model.d_rnn;
        m.codec = default_codec_for(self.model.dim);
        m.esti = self.model.esti;
        m.tau = self.hp.tau;
        m.max_question_len = self.model.max_question_len;
        m
    }

    fn eval_plan(&self) -> EvalPlan {
        EvalPlan {
            train_probe: 1_000,
            eval_test: true,
            estilayer_probe: self.estilayer_probe,
            train_range: self.data.train_range,
            test_range: self.data.test_range,
        }
    }
}

/// Largest redundancy with payload strictly inside `dim` when possible.
fn default_codec_for(dim: usize) -> crate::codec::CodecConfig {
    let r = (dim / 32).max(1);
    let r = if r * 32 == dim && r > 1 { r - 1 } else { r };
    crate::codec::CodecConfig::new(dim, r).expect("dim supports at least r=1")
}

// ---------------------------------------------------------------------------
// dataset plumbing
// ---------------------------------------------------------------------------

fn data_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.out_dir.join("data").join(format!("{}_seed{}", cfg.task.name(), seed))
}

fn dataset_paths(cfg: &ExperimentConfig, seed: u64) -> (PathBuf, PathBuf) {
    let dir = data_dir(cfg, seed);
    (dir.join("train.jsonl"), dir.join("test.jsonl"))
}

/// Generates both splits for one seed (sized by the config).
pub fn generate_splits(
    cfg: &ExperimentConfig,
    seed: u64,
    train_size: usize,
) -> Result<(DatasetSplit, DatasetSplit), CliError> {
    match cfg.task {
        TaskKind::Taq => {
            let train = generate_taq_split(
                &TaqGenConfig {
                    n_questions: train_size,
                    n_tables: 0,
                    rows: cfg.data.rows,
                    cols: cfg.data.cols,
                    value_range: cfg.data.train_range,
                    seed,
                },
                SplitKind::Train,
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?;
            let test = generate_taq_split(
                &TaqGenConfig {
                    n_questions: cfg.data.test_questions,
                    n_tables: 0,
                    rows: cfg.data.rows,
                    cols: cfg.data.cols,
                    value_range: cfg.data.test_range,
                    seed: seed ^ 0x7e57,
                },
                SplitKind::Test,
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?;
            Ok((train, test))
        }
        TaskKind::Lwp => {
            let train = generate_lwp_split(train_size, seed, SplitKind::Train);
            let test = generate_lwp_split(cfg.data.test_questions, seed ^ 0x7e57, SplitKind::Test);
            Ok((train, test))
        }
    }
}

// ---------------------------------------------------------------------------
// commands
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize)]
struct ManifestEntry {
    file: String,
    sha256: String,
    n_samples: usize,
}

/// `gen-data`: writes train/test splits plus a checksum manifest. Refuses to
/// overwrite existing output unless `force` is set.
pub fn cmd_gen_data(cfg: &ExperimentConfig, force: bool) -> Result<Vec<PathBuf>, CliError> {
    let (train_path, test_path) = dataset_paths(cfg, cfg.seed);
    if train_path.exists() && !force {
        return Err(CliError::Config(format!(
            "{} already exists; pass --force to overwrite",
            train_path.display()
        )));
    }
    let train_size =
        if cfg.train_sizes.is_empty() { cfg.data.train_questions } else { *cfg.train_sizes.iter().max().unwrap() };
    let (train, test) = generate_splits(cfg, cfg.seed, train_size)?;
    write_dataset(&train, &train_path).map_err(io_runtime)?;
    write_dataset(&test, &test_path).map_err(io_runtime)?;
    let mut entries = Vec::new();
    let dir = data_dir(cfg, cfg.seed);
    for name in ["train.jsonl", "train.tables.jsonl", "test.jsonl", "test.tables.jsonl"] {
        let p = dir.join(name);
        entries.push(ManifestEntry {
            file: name.to_string(),
            sha256: sha256_hex_file(&p).map_err(io_runtime)?,
            n_samples: if name.starts_with("train") { train.len() } else { test.len() },
        });
    }
    let manifest = serde_json::json!({
        "version": CONFIG_VERSION,
        "task": cfg.task.name(),
        "seed": cfg.seed,
        "files": entries,
    });
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(io_runtime)?;
    Ok(vec![train_path, test_path, dir.join("manifest.json")])
}

fn pretrained_dir(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.out_dir.join("pretrained").join(format!("{}_seed{}", cfg.task.name(), seed))
}

/// `pretrain`: one estimator checkpoint per op. A threshold miss is reported
/// via exit code 3 after writing everything.
pub fn cmd_pretrain(cfg: &ExperimentConfig, seed: u64) -> Result<(), CliError> {
    let dir = pretrained_dir(cfg, seed);
    let pp = PretrainParams { seed, ..cfg.pretrain };
    let reports = pretrain_all::<f32>(
        cfg.task.ops(),
        if cfg.task == TaskKind::Lwp { 1 } else { cfg.data.rows },
        &cfg.model_cfg(),
        &pp,
        cfg.data.train_range,
        &dir,
    )?;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&reports).expect("reports serialize"),
    )
    .map_err(io_runtime)?;
    for r in &reports {
        println!(
            "pretrained {}: accuracy {:.4} after {} epochs{}",
            r.op.name(),
            r.final_accuracy,
            r.epochs_run,
            if r.reached_threshold { "" } else { " (below threshold)" }
        );
    }
    if let Some(miss) = reports.iter().find(|r| !r.reached_threshold) {
        return Err(CliError::ThresholdMiss(format!(
            "estimator {} stopped at {:.4} < {:.4}",
            miss.op.name(),
            miss.final_accuracy,
            cfg.pretrain.threshold
        )));
    }
    Ok(())
}

/// Result of one training run, with everything the aggregation needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub run_id: String,
    pub procedure: TrainingProcedure,
    pub seed: u64,
    pub train_size: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub inference_accuracy: f64,
    pub records: Vec<MetricsRecord>,
}

fn run_id(cfg: &ExperimentConfig, proc_: TrainingProcedure, size: usize, seed: u64) -> String {
    format!("{}_{}_n{}_seed{}", cfg.task.name(), proc_.name(), size, seed)
}

/// Trains one (procedure, size, seed) cell and evaluates the final model on
/// the full splits.
pub fn run_one(
    cfg: &ExperimentConfig,
    procedure: TrainingProcedure,
    train_size: usize,
    seed: u64,
) -> Result<(RunResult, TrainOutcome<f32>), CliError> {
    let (train, test) = load_or_generate_splits(cfg, seed, train_size)?;
    let hp = Hyperparams { seed, ..cfg.hp };
    let pre_dir = pretrained_dir(cfg, seed);
    let pretrained = if procedure.needs_pretrained() { Some(pre_dir.as_path()) } else { None };
    let outcome: TrainOutcome<f32> = run_training(
        cfg.model_cfg(),
        procedure,
        &hp,
        &cfg.eval_plan(),
        &train,
        Some(&test),
        pretrained,
    )?;
    let id = run_id(cfg, procedure, train_size, seed);
    let records: Vec<MetricsRecord> = outcome
        .epochs
        .iter()
        .map(|m| MetricsRecord::from_epoch(&id, seed, "train", m))
        .collect();
    let result = RunResult {
        run_id: id,
        procedure,
        seed,
        train_size,
        train_accuracy: outcome.final_train.task_accuracy,
        test_accuracy: outcome.final_test.as_ref().map(|r| r.task_accuracy).unwrap_or(0.0),
        inference_accuracy: outcome.final_inference.as_ref().map(|r| r.task_accuracy).unwrap_or(0.0),
        records,
    };
    Ok((result, outcome))
}

fn load_or_generate_splits(
    cfg: &ExperimentConfig,
    seed: u64,
    train_size: usize,
) -> Result<(DatasetSplit, DatasetSplit), CliError> {
    let (train_path, test_path) = dataset_paths(cfg, seed);
    if train_path.exists() && test_path.exists() {
        let train = read_dataset(&train_path).map_err(io_runtime)?;
        let test = read_dataset(&test_path).map_err(io_runtime)?;
        if train.len() >= train_size {
            return Ok((truncate_split(train, train_size), test));
        }
    }
    generate_splits(cfg, seed, train_size)
}

fn truncate_split(mut split: DatasetSplit, n: usize) -> DatasetSplit {
    use crate::data::Samples;
    match &mut split.samples {
        Samples::Taq(v) => v.truncate(n),
        Samples::Lwp(v) => v.truncate(n),
    }
    split
}

/// `train`: one procedure end to end; streams per-epoch metrics and saves
/// the final model checkpoint.
pub fn cmd_train(cfg: &ExperimentConfig, procedure: TrainingProcedure) -> Result<RunResult, CliError> {
    let size = if cfg.train_sizes.is_empty() { cfg.data.train_questions } else { cfg.train_sizes[0] };
    let (result, outcome) = run_one(cfg, procedure, size, cfg.seed)?;
    let run_dir = cfg.out_dir.join("runs").join(&result.run_id);
    std::fs::create_dir_all(&run_dir).map_err(io_runtime)?;
    append_records(&run_dir.join("metrics.jsonl"), &result.records).map_err(io_runtime)?;
    save_checkpoint(&outcome.model.params, &run_dir.join("model.ckpt"))
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    std::fs::write(
        run_dir.join("final.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "run_id": result.run_id,
            "train_accuracy": result.train_accuracy,
            "test_accuracy": result.test_accuracy,
            "inference_accuracy": result.inference_accuracy,
        }))
        .unwrap(),
    )
    .map_err(io_runtime)?;
    println!(
        "{}: train {:.4} test {:.4} inference {:.4}",
        result.run_id, result.train_accuracy, result.test_accuracy, result.inference_accuracy
    );
    Ok(result)
}

/// `eval`: evaluates a saved checkpoint on freshly loaded splits in all
/// three modes.
pub fn cmd_eval(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<(), CliError> {
    let size = if cfg.train_sizes.is_empty() { cfg.data.train_questions } else { cfg.train_sizes[0] };
    let (train, test) = load_or_generate_splits(cfg, cfg.seed, size)?;
    let mut model: EstiNet<f32> = EstiNet::new(cfg.model_cfg(), train.vocabulary.clone(), cfg.seed)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    load_checkpoint(&mut model.params, checkpoint).map_err(|e| CliError::Runtime(e.to_string()))?;
    for (split, mode) in [
        (&train, EvalMode::TrainSetTest),
        (&test, EvalMode::TestSetTest),
        (&test, EvalMode::Inference),
    ] {
        let r = evaluate(&model, split, mode);
        println!(
            "{:9} task {:.4} selectors op {:.4} col {:.4} arg {:.4} violations {:.4} (n={})",
            mode.name(),
            r.task_accuracy,
            r.selector_accuracy.op,
            r.selector_accuracy.col,
            r.selector_accuracy.arg,
            r.violation_rate,
            r.n_samples
        );
    }
    Ok(())
}

/// Aggregated accuracy for one (procedure, size) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRow {
    pub procedure: TrainingProcedure,
    pub train_size: usize,
    pub n_runs: usize,
    pub train_mean: f64,
    pub train_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
    pub inference_mean: f64,
    pub inference_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
    (mean, var.sqrt())
}

/// Everything `experiment` produces, kept in memory for callers that gate on
/// it (the acceptance suite does).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub rows: Vec<AggregateRow>,
    pub runs: Vec<RunResult>,
}

impl ExperimentResults {
    pub fn row(&self, procedure: TrainingProcedure, size: usize) -> Option<&AggregateRow> {
        self.rows.iter().find(|r| r.procedure == procedure && r.train_size == size)
    }
}

/// `experiment`: pretrains per seed where needed, executes every
/// (procedure, size, seed) cell (repeats in parallel), and aggregates
/// mean/std accuracy per cell.
pub fn cmd_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResults, CliError> {
    let sizes = if cfg.train_sizes.is_empty() {
        vec![cfg.data.train_questions]
    } else {
        cfg.train_sizes.clone()
    };
    let seeds: Vec<u64> = (0..cfg.repeats as u64).map(|i| cfg.seed + i).collect();

    // phase A: shared estimator pretraining per seed
    if cfg.procedures.iter().any(|p| p.needs_pretrained()) {
        let missing: Vec<u64> = seeds
            .iter()
            .copied()
            .filter(|&s| {
                !cfg.task.ops().iter().all(|op| {
                    pretrained_dir(cfg, s).join(format!("esti_{}.ckpt", op.name())).exists()
                })
            })
            .collect();
        let failures: Vec<String> = missing
            .par_iter()
            .filter_map(|&s| cmd_pretrain(cfg, s).err().map(|e| e.to_string()))
            .collect();
        // a below-threshold estimator is flagged but the experiment continues
        for f in &failures {
            eprintln!("warning: {f}");
        }
    }

    // phase B: all cells
    let mut cells = Vec::new();
    for &size in &sizes {
        for &procedure in &cfg.procedures {
            for &seed in &seeds {
                cells.push((procedure, size, seed));
            }
        }
    }
    let outcomes: Vec<Result<RunResult, String>> = cells
        .par_iter()
        .map(|&(p, n, s)| run_one(cfg, p, n, s).map(|(r, _)| r).map_err(|e| e.to_string()))
        .collect();

    let mut runs = Vec::new();
    let mut failed = 0usize;
    for outcome in outcomes {
        match outcome {
            Ok(r) => runs.push(r),
            Err(e) => {
                failed += 1;
                eprintln!("warning: run failed: {e}");
            }
        }
    }
    if runs.is_empty() {
        return Err(CliError::Runtime(format!("all {} runs failed", cells.len())));
    }
    if failed > 0 {
        eprintln!("warning: aggregating over {} of {} runs", runs.len(), cells.len());
    }

    // persist metrics and aggregate means
    let metrics_path = cfg.out_dir.join("results").join("metrics.jsonl");
    for run in &runs {
        append_records(&metrics_path, &run.records).map_err(io_runtime)?;
    }
    let mut rows = Vec::new();
    for &size in &sizes {
        for &procedure in &cfg.procedures {
            let cell: Vec<&RunResult> =
                runs.iter().filter(|r| r.procedure == procedure && r.train_size == size).collect();
            if cell.is_empty() {
                continue;
            }
            let (train_mean, train_std) = mean_std(&cell.iter().map(|r| r.train_accuracy).collect::<Vec<_>>());
            let (test_mean, test_std) = mean_std(&cell.iter().map(|r| r.test_accuracy).collect::<Vec<_>>());
            let (inference_mean, inference_std) =
                mean_std(&cell.iter().map(|r| r.inference_accuracy).collect::<Vec<_>>());
            rows.push(AggregateRow {
                procedure,
                train_size: size,
                n_runs: cell.len(),
                train_mean,
                train_std,
                test_mean,
                test_std,
                inference_mean,
                inference_std,
            });
        }
    }

    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.procedure.name().to_string(),
                r.train_size.to_string(),
                r.n_runs.to_string(),
                fmt_f(r.train_mean),
                fmt_f(r.train_std),
                fmt_f(r.test_mean),
                fmt_f(r.test_std),
                fmt_f(r.inference_mean),
                fmt_f(r.inference_std),
            ]
        })
        .collect();
    write_csv(
        &cfg.out_dir.join("results").join(format!("{}_experiment.csv", cfg.task.name())),
        &[
            "procedure",
            "train_size",
            "n_runs",
            "train_mean",
            "train_std",
            "test_mean",
            "test_std",
            "inference_mean",
            "inference_std",
        ],
        &csv_rows,
    )
    .map_err(io_runtime)?;

    println!(
        "{:<20} {:>8} {:>7} {:>8} {:>8} {:>8}",
        "procedure", "size", "runs", "train", "test", "infer"
    );
    for r in &rows {
        println!(
            "{:<20} {:>8} {:>7} {:>8.4} {:>8.4} {:>8.4}",
            r.procedure.name(),
            r.train_size,
            r.n_runs,
            r.train_mean,
            r.test_mean,
            r.inference_mean
        );
    }
    Ok(ExperimentResults { rows, runs })
}

/// `plot`: renders the four accuracy panels for each run in a metrics store.
pub fn cmd_plot(metrics: &Path, out_dir: &Path, run_filter: Option<&str>) -> Result<Vec<String>, CliError> {
    let records = read_records(metrics).map_err(io_runtime)?;
    if records.is_empty() {
        return Err(CliError::Runtime(format!("no metrics records in {}", metrics.display())));
    }
    let mut run_ids: Vec<String> = Vec::new();
    for r in &records {
        if !run_ids.contains(&r.run_id) {
            run_ids.push(r.run_id.clone());
        }
    }
    let mut written = Vec::new();
    for id in run_ids {
        if let Some(filter) = run_filter {
            if filter != id {
                continue;
            }
        }
        let subset: Vec<MetricsRecord> = records.iter().filter(|r| r.run_id == id).cloned().collect();
        let dir = out_dir.join(&id);
        for f in plot_run_panels(&subset, &dir).map_err(io_runtime)? {
            written.push(format!("{id}/{f}"));
        }
    }
    if written.is_empty() {
        return Err(CliError::Runtime("no runs matched".into()));
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// argument parsing
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(name = "estinet", version, about = "Train with estimator sublayers, replace them with real applications at inference")]
pub struct Args {
    /// Config file (JSON); omitted fields fall back to the preset.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Preset: taq-paper, taq-desk, lwp-desk.
    #[arg(long, global = true, default_value = "taq-desk")]
    pub preset: String,
    /// Base seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory override (beats ESTINET_OUT_ROOT).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate dataset splits and a checksum manifest.
    GenData,
    /// Pretrain one estimator checkpoint per op.
    Pretrain,
    /// Train one procedure end to end.
    Train {
        #[arg(long, default_value = "online_pretraining")]
        procedure: String,
    },
    /// Evaluate a checkpoint in train/test/inference modes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run the full procedure comparison with seeded repeats.
    Experiment,
    /// Render accuracy panels from a metrics store.
    Plot {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        run: Option<String>,
    },
}

/// Resolves the effective config: flag > file > preset, plus the
/// `ESTINET_OUT_ROOT` environment override for the output root.
pub fn resolve_config(args: &Args) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::preset(&args.preset)
            .ok_or_else(|| CliError::Config(format!("unknown preset {:?}", args.preset)))?,
    };
    if args.config.is_none() {
        if let Ok(root) = std::env::var("ESTINET_OUT_ROOT") {
            cfg.out_dir = PathBuf::from(root);
        }
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &args.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

/// Entry point for the binary; returns the process exit code.
pub fn run(args: Args) -> i32 {
    let result = (|| -> Result<(), CliError> {
        let cfg = resolve_config(&args)?;
        match &args.command {
            Command::GenData => {
                let files = cmd_gen_data(&cfg, args.force)?;
                for f in files {
                    println!("wrote {}", f.display());
                }
                Ok(())
            }
            Command::Pretrain => cmd_pretrain(&cfg, cfg.seed),
            Command::Train { procedure } => {
                let procedure = TrainingProcedure::from_name(procedure)
                    .ok_or_else(|| CliError::Config(format!("unknown procedure {procedure:?}")))?;
                cmd_train(&cfg, procedure).map(|_| ())
            }
            Command::Eval { checkpoint } => cmd_eval(&cfg, checkpoint),
            Command::Experiment => cmd_experiment(&cfg).map(|_| ()),
            Command::Plot { metrics, run } => {
                let files = cmd_plot(metrics, &cfg.out_dir.join("plots"), run.as_deref())?;
                for f in files {
                    println!("wrote {f}");
                }
                Ok(())
            }
        }
    })();
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
