//! Experiment harness behind the `distillkit` binary.
//!
//! An experiment config is a JSON object holding every [`RunConfig`] field
//! at the top level plus `run_id`, `data` and an optional `ensemble`
//! section. `cmd_run` writes into `<out>/<run_id>/`:
//!
//! ```text
//! manifest.json           config, config hash, dataset hash
//! report.json             EvalReport per model
//! predictions.json        test-set predictions per model
//! logs/<stage>.jsonl      one record per epoch
//! checkpoints/<model>.json
//! svm/<model>.json        when the ensemble is enabled
//! ```
//!
//! Every artifact carries the manifest hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{
    generate_with, load_directory, save_directory, DataError, DatasetSplit, Occlusion, SplitName, SyntheticConfig,
    SyntheticTask, Target, TaskKind,
};
use crate::ensemble::{
    extract_embeddings, fit_margin_model, EmbeddingSet, EmbeddingSource, EnsembleError, MarginFitConfig, MarginKind,
    DEFAULT_C_GRID, DEFAULT_EPOCHS,
};
use crate::losses::{DistillConfig, DistillMode};
use crate::nn::{checkpoint, NetworkParams, NnError};
use crate::stats::{mcnemar_test, EvalReport, McNemarResult, StatsError};
use crate::trainer::{
    predict, run_curriculum, train_stage3_distill, EpochRecord, Predictions, RunConfig, StageReport, TrainError,
};

/// Overrides the config seed when set.
pub const SEED_ENV: &str = "DISTILLKIT_SEED";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error at `{path}`: {reason}")]
    Config { path: String, reason: String },
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
    #[error("run {run} was evaluated on dataset {got}, baseline on {expected}")]
    MismatchedTestSet { run: String, expected: String, got: String },
    #[error("no model `{model}` in {run}")]
    MissingModel { run: String, model: String },
    #[error("malformed artifact {path}: {reason}")]
    Artifact { path: String, reason: String },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Nn(#[from] NnError),
}

impl CliError {
    /// 2 for configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Train(TrainError::Config { .. }) => 2,
            _ => 1,
        }
    }
}

fn config_err(path: impl Into<String>, reason: impl ToString) -> CliError {
    CliError::Config {
        path: path.into(),
        reason: reason.to_string(),
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> CliError + '_ {
    move |e| CliError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        task: SyntheticTask,
        n: usize,
        noise: f64,
        /// Defaults to the run seed.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
        /// Defaults to `SyntheticConfig::for_task`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        generator: Option<SyntheticConfig>,
    },
    /// Dataset directory; relative paths resolve against the config file.
    Directory { path: PathBuf },
}

fn default_c_grid() -> Vec<f64> {
    DEFAULT_C_GRID.to_vec()
}

fn default_svm_epochs() -> usize {
    DEFAULT_EPOCHS
}

/// A second stage-3 student trained with triplet KD, and SVMs on the
/// embeddings of both distilled students.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub triplet: DistillConfig,
    pub lr: f64,
    pub epochs: usize,
    #[serde(default = "default_c_grid")]
    pub c_grid: Vec<f64>,
    #[serde(default)]
    pub standardize: bool,
    #[serde(default = "default_svm_epochs")]
    pub svm_epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub run_id: String,
    pub data: DataSource,
    pub run: RunConfig,
    pub ensemble: Option<EnsembleConfig>,
    /// Directory the config was read from.
    pub base_dir: PathBuf,
}

fn take_field<T: serde::de::DeserializeOwned>(obj: &mut serde_json::Map<String, Value>, key: &str) -> Result<Option<T>, CliError> {
    let Some(v) = obj.remove(key) else { return Ok(None) };
    serde_path_to_error::deserialize(v)
        .map(Some)
        .map_err(|e| config_err(join_path(key, &e.path().to_string()), e.inner()))
}

fn join_path(prefix: &str, rest: &str) -> String {
    if rest.is_empty() || rest == "." {
        prefix.to_string()
    } else {
        format!("{prefix}.{rest}")
    }
}

impl ExperimentConfig {
    /// Parse and validate. `seed_override` wins over `DISTILLKIT_SEED`,
    /// which wins over the file.
    pub fn from_json(text: &str, base_dir: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let value: Value = serde_json::from_str(text).map_err(|e| config_err("", e))?;
        let Value::Object(mut obj) = value else {
            return Err(config_err("", "expected a JSON object"));
        };
        let run_id: String = take_field(&mut obj, "run_id")?.ok_or_else(|| config_err("run_id", "missing field"))?;
        let data: DataSource = take_field(&mut obj, "data")?.ok_or_else(|| config_err("data", "missing field"))?;
        let ensemble: Option<EnsembleConfig> = take_field(&mut obj, "ensemble")?;
        let mut run: RunConfig = serde_path_to_error::deserialize(Value::Object(obj)).map_err(|e| {
            let path = e.path().to_string();
            config_err(if path == "." { String::new() } else { path }, e.inner())
        })?;
        if let Some(seed) = seed_override {
            run.seed = seed;
        } else if let Ok(raw) = std::env::var(SEED_ENV) {
            run.seed = raw
                .trim()
                .parse()
                .map_err(|_| config_err("seed", format!("{SEED_ENV}={raw} is not an unsigned integer")))?;
        }
        let cfg = Self {
            run_id,
            data,
            run,
            ensemble,
            base_dir: base_dir.to_path_buf(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, seed_override: Option<u64>) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_json(&text, base, seed_override)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
            || self.run_id.starts_with('.')
        {
            return Err(config_err("run_id", "use letters, digits, `-`, `_` and `.` only"));
        }
        self.run.validate()?;
        if let DataSource::Synthetic { task, noise, .. } = &self.data {
            if !(0.0..1.0).contains(noise) {
                return Err(config_err("data.noise", format!("must lie in [0, 1), got {noise}")));
            }
            if task.task_kind() != self.run.task {
                return Err(config_err("task", "does not match data.task"));
            }
        }
        if let Some(e) = &self.ensemble {
            if self.run.distill.mode == DistillMode::TripletKd {
                return Err(config_err(
                    "distill.mode",
                    "the ensemble pairs a standard or hint KD student with a triplet KD one",
                ));
            }
            if e.triplet.mode != DistillMode::TripletKd {
                return Err(config_err("ensemble.triplet.mode", "must be triplet_kd"));
            }
            e.triplet
                .validate()
                .map_err(|(field, msg)| config_err(format!("ensemble.triplet.{field}"), msg))?;
            if !(e.lr.is_finite() && e.lr > 0.0) {
                return Err(config_err("ensemble.lr", format!("must be positive, got {}", e.lr)));
            }
            if e.c_grid.is_empty() {
                return Err(config_err("ensemble.c_grid", "must not be empty"));
            }
            if let Some(c) = e.c_grid.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
                return Err(config_err("ensemble.c_grid", format!("C must be positive, got {c}")));
            }
            if e.svm_epochs == 0 {
                return Err(config_err("ensemble.svm_epochs", "must be >= 1"));
            }
        }
        Ok(())
    }

    /// The config as one flat JSON object with sorted keys.
    pub fn to_value(&self) -> Value {
        let mut v = serde_json::to_value(&self.run).expect("run config serializes");
        let obj = v.as_object_mut().expect("object");
        obj.insert("run_id".into(), Value::String(self.run_id.clone()));
        obj.insert("data".into(), serde_json::to_value(&self.data).expect("data source serializes"));
        if let Some(e) = &self.ensemble {
            obj.insert("ensemble".into(), serde_json::to_value(e).expect("ensemble serializes"));
        }
        v
    }

    /// SHA-256 of the canonical config JSON.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_value().to_string().as_bytes())
    }

    pub fn load_data(&self) -> Result<DatasetSplit, CliError> {
        match &self.data {
            DataSource::Synthetic {
                task,
                n,
                noise,
                seed,
                generator,
            } => {
                let gen = generator.unwrap_or_else(|| SyntheticConfig::for_task(*task));
                Ok(generate_with(*task, &gen, *n, *noise, seed.unwrap_or(self.run.seed))?)
            }
            DataSource::Directory { path } => Ok(load_directory(&self.base_dir.join(path))?),
        }
    }
}

/// SHA-256 over the task, then split name, target and 8-bit pixels of every
/// image in split order.
pub fn dataset_hash(data: &DatasetSplit) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_string(&data.task).expect("task serializes").as_bytes());
    for name in [SplitName::Train, SplitName::Validation, SplitName::Test] {
        for img in data.split(name) {
            h.update(name.as_str().as_bytes());
            h.update(serde_json::to_string(&img.target).expect("target serializes").as_bytes());
            h.update((img.pixels.height as u64).to_le_bytes());
            h.update((img.pixels.width as u64).to_le_bytes());
            let bytes: Vec<u8> = img
                .pixels
                .pixels
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            h.update(&bytes);
        }
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub run_id: String,
    pub manifest_hash: String,
    pub dataset_hash: String,
    pub output_dir: String,
    pub config: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub manifest_hash: String,
    pub dataset_hash: String,
    pub task: TaskKind,
    pub models: BTreeMap<String, EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionFile {
    pub run_id: String,
    pub manifest_hash: String,
    pub dataset_hash: String,
    pub truth: Vec<Target>,
    pub models: BTreeMap<String, Predictions>,
}

#[derive(Serialize)]
struct LogLine<'a> {
    manifest_hash: &'a str,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub report: RunReport,
    pub predictions: PredictionFile,
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(io_err(path))
}

fn pretty(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn eval_report(pred: &Predictions, truth: &[Target], task: TaskKind) -> Result<EvalReport, CliError> {
    Ok(match (pred, task) {
        (Predictions::Labels(labels), TaskKind::Classification { num_classes }) => {
            EvalReport::classification(labels, &class_ids(truth)?, num_classes)?
        }
        (Predictions::Values(values), TaskKind::Regression) => {
            EvalReport::regression(values, &truth.iter().map(Target::value).collect::<Vec<_>>())?
        }
        _ => {
            return Err(CliError::Artifact {
                path: "predictions".into(),
                reason: "prediction kind does not match the task".into(),
            })
        }
    })
}

fn class_ids(truth: &[Target]) -> Result<Vec<usize>, CliError> {
    truth
        .iter()
        .map(|t| t.class_id())
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| CliError::Artifact {
            path: "predictions".into(),
            reason: "regression targets in a classification comparison".into(),
        })
}

fn paired(a: &Predictions, b: &Predictions, truth: &[Target]) -> Result<Option<McNemarResult>, CliError> {
    match (a, b) {
        (Predictions::Labels(x), Predictions::Labels(y)) => Ok(Some(mcnemar_test(x, y, &class_ids(truth)?)?)),
        _ => Ok(None),
    }
}

fn log_stage(dir: &Path, name: &str, hash: &str, report: &StageReport, verbose: bool) -> Result<(), CliError> {
    let mut text = String::new();
    for record in &report.epochs {
        text.push_str(&serde_json::to_string(&LogLine { manifest_hash: hash, record }).expect("log line"));
        text.push('\n');
        if verbose {
            eprintln!(
                "[{name}] epoch {:>3}  lr {:.1e}  train {:.4}  val {:.4}  metric {:.4}",
                record.epoch, record.lr, record.train_loss, record.val_loss, record.val_metric
            );
        }
    }
    write(&dir.join(format!("{name}.jsonl")), &text)
}

fn save_params(dir: &Path, name: &str, params: &NetworkParams, hash: &str) -> Result<(), CliError> {
    Ok(checkpoint::save_with_provenance(params, &dir.join(format!("{name}.json")), Some(hash))?)
}

/// Run the curriculum (and the ensemble when configured) and write all
/// artifacts under `out_root/<run_id>/`.
pub fn cmd_run(config_path: &Path, out_root: &Path, seed_override: Option<u64>, verbose: bool) -> Result<RunOutcome, CliError> {
    let cfg = ExperimentConfig::load(config_path, seed_override)?;
    run_experiment(&cfg, out_root, verbose)
}

pub fn run_experiment(cfg: &ExperimentConfig, out_root: &Path, verbose: bool) -> Result<RunOutcome, CliError> {
    let data = cfg.load_data()?;
    if data.task != cfg.run.task {
        return Err(config_err("task", "does not match the dataset"));
    }
    if let Some((h, w)) = data.image_size() {
        if cfg.run.spec.input_shape != [1, h, w] {
            return Err(config_err(
                "spec.input_shape",
                format!("dataset images are 1×{h}×{w}"),
            ));
        }
    }
    let hash = cfg.hash();
    let data_hash = dataset_hash(&data);
    let out_dir = out_root.join(&cfg.run_id);
    let ckpt_dir = out_dir.join("checkpoints");
    let log_dir = out_dir.join("logs");
    for d in [&ckpt_dir, &log_dir] {
        std::fs::create_dir_all(d).map_err(io_err(d))?;
    }
    let manifest = ExperimentManifest {
        run_id: cfg.run_id.clone(),
        manifest_hash: hash.clone(),
        dataset_hash: data_hash.clone(),
        output_dir: out_dir.display().to_string(),
        config: cfg.to_value(),
    };
    write(&out_dir.join("manifest.json"), &pretty(&manifest))?;

    let out = run_curriculum(&cfg.run, &data)?;
    let stage_names = ["stage1_teacher", "stage2_student", "stage3_distill"];
    for (name, report) in stage_names.iter().zip(&out.reports) {
        log_stage(&log_dir, name, &hash, report, verbose)?;
    }
    save_params(&ckpt_dir, "teacher", &out.teacher, &hash)?;
    save_params(&ckpt_dir, "student", &out.student, &hash)?;
    save_params(&ckpt_dir, "distilled", &out.distilled, &hash)?;

    let spec = &cfg.run.spec;
    let occ = cfg.run.occlusion[1];
    let test = &data.test;
    let mut models: BTreeMap<String, Predictions> = BTreeMap::new();
    models.insert("teacher_full".into(), predict(&out.teacher, spec, test, Occlusion::None)?);
    models.insert("teacher_occluded".into(), predict(&out.teacher, spec, test, occ)?);
    models.insert("student".into(), predict(&out.student, spec, test, occ)?);
    models.insert("student_full".into(), predict(&out.student, spec, test, Occlusion::None)?);
    models.insert("distilled".into(), predict(&out.distilled, spec, test, occ)?);
    let mut pairs: Vec<(&str, &str)> = vec![("distilled", "student"), ("student", "teacher_occluded")];

    if let Some(e) = &cfg.ensemble {
        let mut tcfg = cfg.run.clone();
        tcfg.distill = e.triplet;
        tcfg.lr[2] = e.lr;
        tcfg.stage_epochs[2] = e.epochs;
        let (triplet, report) = train_stage3_distill(&out.teacher, &out.student, &tcfg, &data)?;
        log_stage(&log_dir, "stage3_triplet", &hash, &report, verbose)?;
        save_params(&ckpt_dir, "triplet", &triplet, &hash)?;
        models.insert("triplet".into(), predict(&triplet, spec, test, occ)?);

        let first = match cfg.run.distill.mode {
            DistillMode::HintKd => EmbeddingSource::HintKd,
            _ => EmbeddingSource::StandardKd,
        };
        let embed = |params: &NetworkParams, source| -> Result<[EmbeddingSet; 3], CliError> {
            Ok([
                extract_embeddings(params, spec, &data.train, occ, source)?,
                extract_embeddings(params, spec, &data.validation, occ, source)?,
                extract_embeddings(params, spec, &data.test, occ, source)?,
            ])
        };
        let a = embed(&out.distilled, first)?;
        let b = embed(&triplet, EmbeddingSource::TripletKd)?;
        let cat = [a[0].concat(&b[0])?, a[1].concat(&b[1])?, a[2].concat(&b[2])?];
        let fit_cfg = MarginFitConfig {
            c_grid: e.c_grid.clone(),
            epochs: e.svm_epochs,
            standardize: e.standardize,
            seed: cfg.run.seed,
        };
        let kind = MarginKind::for_task(cfg.run.task);
        let svm_dir = out_dir.join("svm");
        std::fs::create_dir_all(&svm_dir).map_err(io_err(&svm_dir))?;
        for (name, sets) in [("svm_standard", &a), ("svm_triplet", &b), ("svm_ensemble", &cat)] {
            let fit = fit_margin_model(&sets[0], &sets[1], kind, &fit_cfg)?;
            let mut v = serde_json::to_value(&fit.model).expect("model serializes");
            let obj = v.as_object_mut().expect("object");
            obj.insert("manifest_hash".into(), Value::String(hash.clone()));
            obj.insert("grid".into(), serde_json::to_value(&fit.points).expect("grid serializes"));
            write(&svm_dir.join(format!("{name}.json")), &pretty(&v))?;
            models.insert(name.into(), fit.model.predict(&sets[2])?);
        }
        pairs.extend([("triplet", "distilled"), ("svm_ensemble", "svm_standard"), ("svm_ensemble", "svm_triplet")]);
    }

    let truth: Vec<Target> = test.iter().map(|i| i.target).collect();
    let mut reports = BTreeMap::new();
    for (name, pred) in &models {
        reports.insert(name.clone(), eval_report(pred, &truth, cfg.run.task)?);
    }
    for (a, b) in pairs {
        if let Some(r) = paired(&models[a], &models[b], &truth)? {
            reports.get_mut(a).expect("model").paired.insert(b.to_string(), r);
        }
    }
    let report = RunReport {
        run_id: cfg.run_id.clone(),
        manifest_hash: hash.clone(),
        dataset_hash: data_hash.clone(),
        task: cfg.run.task,
        models: reports,
    };
    let predictions = PredictionFile {
        run_id: cfg.run_id.clone(),
        manifest_hash: hash,
        dataset_hash: data_hash,
        truth,
        models,
    };
    write(&out_dir.join("report.json"), &pretty(&report))?;
    write(&out_dir.join("predictions.json"), &(serde_json::to_string(&predictions).expect("predictions") + "\n"))?;
    Ok(RunOutcome {
        out_dir,
        report,
        predictions,
    })
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::Artifact {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

/// `DIR` or `DIR:MODEL`; the model defaults to `distilled`.
pub fn parse_run_ref(s: &str) -> (PathBuf, String) {
    match s.rsplit_once(':') {
        Some((dir, model)) if !dir.is_empty() && !model.is_empty() && !model.contains(['/', '\\']) => {
            (PathBuf::from(dir), model.to_string())
        }
        _ => (PathBuf::from(s), "distilled".to_string()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub run: String,
    pub model: String,
    pub metrics: BTreeMap<String, f64>,
    /// McNemar p against the baseline; `None` for regression.
    pub p: Option<f64>,
    pub significant: bool,
    /// Significant and better than the baseline.
    pub dagger: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareTable {
    pub task: TaskKind,
    pub baseline: String,
    pub rows: Vec<CompareRow>,
}

impl CompareTable {
    fn metric_names(&self) -> &'static [&'static str] {
        match self.task {
            TaskKind::Classification { .. } => &["accuracy", "weighted_accuracy"],
            TaskKind::Regression => &["mae"],
        }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["run", "model"];
        header.extend(self.metric_names());
        header.extend(["p", "significant"]);
        w.write_record(&header).expect("in-memory csv");
        for r in &self.rows {
            let mut rec = vec![r.run.clone(), r.model.clone()];
            rec.extend(self.metric_names().iter().map(|m| format!("{:.6}", r.metrics[*m])));
            rec.push(r.p.map_or(String::new(), |p| format!("{p:.6}")));
            rec.push(r.significant.to_string());
            w.write_record(&rec).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Aligned text table; `†` marks rows significantly better than the
    /// baseline at the 0.05 level.
    pub fn to_pretty(&self) -> String {
        let mut header: Vec<String> = vec!["run".into(), "model".into()];
        header.extend(self.metric_names().iter().map(|s| s.to_string()));
        header.push("p".into());
        let mut rows = vec![header];
        for r in &self.rows {
            let mut cells = vec![r.run.clone(), r.model.clone()];
            for (i, m) in self.metric_names().iter().enumerate() {
                let mut cell = format!("{:.4}", r.metrics[*m]);
                if i == 0 && r.dagger {
                    cell.push('†');
                }
                cells.push(cell);
            }
            cells.push(r.p.map_or("-".into(), |p| format!("{p:.4}")));
            rows.push(cells);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = format!("baseline: {}\n", self.baseline);
        for (i, r) in rows.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
                out.push('\n');
            }
        }
        out
    }
}

/// Compare models from several runs against a baseline model on the shared
/// test set.
pub fn cmd_compare(runs: &[(PathBuf, String)], baseline: &(PathBuf, String)) -> Result<CompareTable, CliError> {
    let load = |dir: &Path| read_json::<PredictionFile>(&dir.join("predictions.json"));
    let base = load(&baseline.0)?;
    let base_pred = base.models.get(&baseline.1).ok_or_else(|| CliError::MissingModel {
        run: base.run_id.clone(),
        model: baseline.1.clone(),
    })?;
    let task = if base.truth.iter().all(|t| t.class_id().is_some()) && base_pred.labels().is_some() {
        let k = base.truth.iter().filter_map(Target::class_id).max().unwrap_or(0) + 1;
        let k = base.models.values().filter_map(Predictions::labels).flatten().copied().max().map_or(k, |m| k.max(m + 1));
        TaskKind::Classification { num_classes: k }
    } else {
        TaskKind::Regression
    };
    let base_report = eval_report(base_pred, &base.truth, task)?;
    let mut rows = Vec::new();
    for (dir, model) in runs {
        let file = load(dir)?;
        if file.dataset_hash != base.dataset_hash || file.truth != base.truth {
            return Err(CliError::MismatchedTestSet {
                run: file.run_id,
                expected: base.dataset_hash.clone(),
                got: file.dataset_hash,
            });
        }
        let pred = file.models.get(model).ok_or_else(|| CliError::MissingModel {
            run: file.run_id.clone(),
            model: model.clone(),
        })?;
        let report = eval_report(pred, &file.truth, task)?;
        let test = paired(pred, base_pred, &file.truth)?;
        let significant = test.is_some_and(|t| t.significant());
        let better = match task {
            TaskKind::Classification { .. } => report.metrics["accuracy"] > base_report.metrics["accuracy"],
            TaskKind::Regression => report.metrics["mae"] < base_report.metrics["mae"],
        };
        rows.push(CompareRow {
            run: file.run_id,
            model: model.clone(),
            metrics: report.metrics,
            p: test.map(|t| t.p_value),
            significant,
            dagger: significant && better,
        });
    }
    Ok(CompareTable {
        task,
        baseline: format!("{}:{}", base.run_id, baseline.1),
        rows,
    })
}

/// Generate a synthetic dataset and write it in the directory layout.
/// Returns the dataset hash.
pub fn cmd_gen_data(task: SyntheticTask, n: usize, noise: f64, seed: u64, out_dir: &Path) -> Result<String, CliError> {
    let data = generate_with(task, &SyntheticConfig::for_task(task), n, noise, seed)?;
    save_directory(&data, out_dir)?;
    Ok(dataset_hash(&data))
}

/// Write the penultimate activations of one model on one split as CSV:
/// a `# manifest_hash=...` line, a header `target,e0,e1,...`, then one row
/// per sample. Returns the number of rows.
pub fn cmd_export_embeddings(
    run_dir: &Path,
    model: &str,
    split: SplitName,
    occlusion: Option<Occlusion>,
    out: &Path,
) -> Result<usize, CliError> {
    let manifest: ExperimentManifest = read_json(&run_dir.join("manifest.json"))?;
    let text = manifest.config.to_string();
    let base = std::env::current_dir().map_err(io_err(run_dir))?;
    let mut cfg = ExperimentConfig::from_json(&text, &base, Some(config_seed(&manifest.config)?))?;
    if let DataSource::Directory { path } = &cfg.data {
        if path.is_relative() {
            return Err(config_err("data.path", "relative dataset paths cannot be resolved from a run directory"));
        }
    }
    cfg.base_dir = base;
    let data = cfg.load_data()?;
    if dataset_hash(&data) != manifest.dataset_hash {
        return Err(CliError::MismatchedTestSet {
            run: manifest.run_id,
            expected: manifest.dataset_hash,
            got: dataset_hash(&data),
        });
    }
    let params = checkpoint::load(&run_dir.join("checkpoints").join(format!("{model}.json")))?;
    let source = match (model, cfg.run.distill.mode) {
        ("triplet", _) => EmbeddingSource::TripletKd,
        (_, DistillMode::HintKd) => EmbeddingSource::HintKd,
        _ => EmbeddingSource::StandardKd,
    };
    let occ = occlusion.unwrap_or(cfg.run.occlusion[1]);
    let set = extract_embeddings(&params, &cfg.run.spec, data.split(split), occ, source)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["target".to_string()];
    header.extend((0..set.dim()).map(|j| format!("e{j}")));
    w.write_record(&header).expect("in-memory csv");
    for i in 0..set.len() {
        let mut rec = vec![set.targets()[i].value().to_string()];
        rec.extend(set.row(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).expect("in-memory csv");
    }
    let body = String::from_utf8(w.into_inner().expect("flush")).expect("utf-8");
    write(out, &format!("# manifest_hash={}\n{body}", manifest.manifest_hash))?;
    Ok(set.len())
}

fn config_seed(config: &Value) -> Result<u64, CliError> {
    config
        .get("seed")
        .and_then(Value::as_u64)
        .ok_or_else(|| config_err("seed", "missing from the stored manifest"))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "run_id": "t",
        "data": {"source": "synthetic", "task": {"kind": "expression", "num_classes": 4}, "n": 200, "noise": 0.3},
        "spec": {"input_shape": [1, 16, 16], "blocks": [{"type": "conv", "out_channels": 4, "kernel": 3}, {"type": "max_pool", "window": 2}], "embedding_dim": 8, "head": {"type": "classifier", "num_classes": 4}, "hint_block_index": 0},
        "task": {"kind": "classification", "num_classes": 4},
        "occlusion": ["none", "upper_half_hidden", "upper_half_hidden"],
        "stage_epochs": [1, 1, 1],
        "optimizer": "sgd_momentum",
        "lr": [0.01, 0.005, 0.02],
        "batch_size": 64,
        "distill": {"mode": "standard_kd", "lambda": 0.7, "tau": 2.0},
        "mining": {"pos_subset_fraction": 0.1, "neg_subset_fraction": 0.1},
        "seed": 5
    }"#;

    fn with(edit: impl FnOnce(&mut Value)) -> String {
        let mut v: Value = serde_json::from_str(MINIMAL).unwrap();
        edit(&mut v);
        v.to_string()
    }

    fn parse(text: &str) -> Result<ExperimentConfig, CliError> {
        ExperimentConfig::from_json(text, Path::new("."), Some(5))
    }

    fn path_of(r: Result<ExperimentConfig, CliError>) -> String {
        match r {
            Err(CliError::Config { path, .. }) => path,
            Err(CliError::Train(TrainError::Config { path, .. })) => path,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_parses() {
        let cfg = parse(MINIMAL).unwrap();
        assert_eq!(cfg.run.seed, 5);
        assert_eq!(cfg.run.lr_patience, 10);
        assert!(cfg.ensemble.is_none());
    }

    #[test]
    fn lambda_out_of_range_names_the_field() {
        let err = parse(&with(|v| v["distill"]["lambda"] = 1.5.into())).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert_eq!(path_of(Err(err)), "distill.lambda");
    }

    #[test]
    fn type_errors_carry_paths() {
        assert_eq!(path_of(parse(&with(|v| v["distill"]["lambda"] = "x".into()))), "distill.lambda");
        assert_eq!(path_of(parse(&with(|v| v["lr"][1] = "x".into()))), "lr[1]");
        assert_eq!(path_of(parse(&with(|v| v["data"]["noise"] = 1.5.into()))), "data.noise");
        assert_eq!(path_of(parse(&with(|v| v["bogus"] = 1.into()))), "bogus");
        assert_eq!(path_of(parse(&with(|v| v["run_id"] = "../x".into()))), "run_id");
    }

    #[test]
    fn ensemble_section_is_checked() {
        let bad_mode = with(|v| {
            v["ensemble"] = serde_json::json!({"triplet": {"mode": "standard_kd", "lambda": 0.5}, "lr": 0.01, "epochs": 1});
        });
        assert_eq!(path_of(parse(&bad_mode)), "ensemble.triplet.mode");
        let bad_grid = with(|v| {
            v["ensemble"] = serde_json::json!({"triplet": {"mode": "triplet_kd", "lambda": 0.5}, "lr": 0.01, "epochs": 1, "c_grid": []});
        });
        assert_eq!(path_of(parse(&bad_grid)), "ensemble.c_grid");
    }

    #[test]
    fn hash_tracks_config_changes() {
        let a = parse(MINIMAL).unwrap();
        let b = parse(MINIMAL).unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = parse(&with(|v| v["lr"][2] = 0.03.into())).unwrap();
        assert_ne!(a.hash(), c.hash());
        let d = ExperimentConfig::from_json(MINIMAL, Path::new("."), Some(6)).unwrap();
        assert_ne!(a.hash(), d.hash());
    }

    #[test]
    fn round_trips_through_to_value() {
        let a = parse(MINIMAL).unwrap();
        let b = parse(&a.to_value().to_string()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn run_refs() {
        assert_eq!(parse_run_ref("out/a"), (PathBuf::from("out/a"), "distilled".into()));
        assert_eq!(parse_run_ref("out/a:student"), (PathBuf::from("out/a"), "student".into()));
    }
}
