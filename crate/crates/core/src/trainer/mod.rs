//! The three-stage curriculum.
//!
//! 1. [`train_stage1_teacher`]: a fresh network on fully-visible images.
//! 2. [`train_stage2_student`]: the teacher's weights fine-tuned on occluded
//!    images. This is the baseline without distillation.
//! 3. [`train_stage3_distill`]: the stage-2 student trained against the
//!    frozen teacher. The teacher always sees the full image and the student
//!    the occluded one.
//!
//! Each stage returns the parameters of its best validation epoch and a
//! [`StageReport`]. The validation metric is the error rate for
//! classification and the MAE for regression.

mod optim;
mod schedule;

pub use optim::{Optimizer, OptimizerKind, SGD_MOMENTUM};
pub use schedule::{lr_plateau_step, PlateauSchedule, LR_FLOOR};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{AutogradError, Graph, Tensor};
use crate::data::{all_batch, gather_batch, DataError, DatasetSplit, LabeledImage, Occlusion, TaskKind};
use crate::losses::{self, DistillConfig, DistillMode, LossError, Targets};
use crate::mining::{self, MiningConfig, MiningError, Triplet};
use crate::nn::{self, checkpoint, BoundParams, Head, NetworkParams, NetworkSpec, NnError, Role};

const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainError {
    #[error("invalid config at `{path}`: {reason}")]
    Config { path: String, reason: String },
    #[error("stage {stage} diverged at epoch {epoch}: loss is {value}")]
    Divergence { stage: u8, epoch: usize, value: f64 },
    #[error("{mode:?} distillation is not supported for {task:?}")]
    Incompatible { mode: DistillMode, task: TaskKind },
    #[error("data does not match the config: {0}")]
    DataMismatch(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Mining(#[from] MiningError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

fn config_err(path: &str, reason: impl Into<String>) -> TrainError {
    TrainError::Config {
        path: path.to_string(),
        reason: reason.into(),
    }
}

fn default_patience() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub spec: NetworkSpec,
    pub task: TaskKind,
    /// Occlusion for stages 1, 2 and 3.
    pub occlusion: [Occlusion; 3],
    pub stage_epochs: [usize; 3],
    pub optimizer: OptimizerKind,
    pub lr: [f64; 3],
    #[serde(default = "default_patience")]
    pub lr_patience: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
    pub distill: DistillConfig,
    pub mining: MiningConfig,
    pub seed: u64,
}

impl RunConfig {
    /// Desk-scale defaults for a task: 30/20/20 epochs, SGD for plain
    /// networks and Adam for residual ones, standard KD for multi-class
    /// tasks and hint KD otherwise.
    pub fn for_task(spec: NetworkSpec, task: TaskKind, occlusion: Occlusion, seed: u64) -> Self {
        let (optimizer, lr) = if spec.is_residual() {
            (OptimizerKind::Adam, [1e-3, 5e-4, 5e-4])
        } else {
            (OptimizerKind::SgdMomentum, [1e-2, 5e-3, 2e-2])
        };
        let distill = match task {
            TaskKind::Classification { num_classes } if num_classes > 2 => DistillConfig::standard(0.7, 2.0),
            _ => DistillConfig::hint(0.5),
        };
        let mining = match task {
            TaskKind::Classification { num_classes } if num_classes > 2 => MiningConfig::expression(),
            _ => MiningConfig::age_gender(),
        };
        Self {
            spec,
            task,
            occlusion: [Occlusion::None, occlusion, occlusion],
            stage_epochs: [30, 20, 20],
            optimizer,
            lr,
            lr_patience: default_patience(),
            batch_size: 64,
            weight_decay: 0.0,
            distill,
            mining,
            seed,
        }
    }

    /// Range and consistency checks; errors carry a dotted field path.
    pub fn validate(&self) -> Result<(), TrainError> {
        self.spec
            .block_shapes()
            .map_err(|e| config_err("spec", e.to_string()))?;
        match (self.task, self.spec.head) {
            (TaskKind::Classification { num_classes }, Head::Classifier { num_classes: k }) if k == num_classes => {}
            (TaskKind::Regression, Head::Regressor) => {}
            _ => return Err(config_err("spec.head", "head does not match the task")),
        }
        if self.occlusion[0] != Occlusion::None {
            return Err(config_err("occlusion[0]", "stage 1 trains on fully-visible images"));
        }
        if self.occlusion[1] != self.occlusion[2] {
            return Err(config_err("occlusion[2]", "stages 2 and 3 must use the same occlusion"));
        }
        for (i, lr) in self.lr.iter().enumerate() {
            if !(lr.is_finite() && *lr > 0.0) {
                return Err(config_err(&format!("lr[{i}]"), format!("must be positive, got {lr}")));
            }
        }
        if self.lr_patience == 0 {
            return Err(config_err("lr_patience", "must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size", "must be >= 1"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(config_err("weight_decay", "must be >= 0"));
        }
        self.distill
            .validate()
            .map_err(|(field, msg)| config_err(&format!("distill.{field}"), msg))?;
        self.mining
            .validate()
            .map_err(|(field, msg)| config_err(&format!("mining.{field}"), msg))?;
        if self.distill.mode == DistillMode::StandardKd && self.task.is_regression() {
            return Err(config_err(
                "distill.mode",
                "standard_kd needs class probabilities; use hint_kd or triplet_kd for regression",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Error rate or MAE on the validation split.
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: u8,
    pub epochs: Vec<EpochRecord>,
    /// `None` when the stage ran zero epochs.
    pub best_epoch: Option<usize>,
    /// LR used in each epoch.
    pub lr_trace: Vec<f64>,
    /// Number of triplet mining rounds.
    pub mining_calls: usize,
    /// Content hash of the returned parameters' checkpoint.
    pub checkpoint_id: String,
}

impl StageReport {
    /// One JSON object per epoch, newline-terminated.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }
}

/// First 16 hex digits of the SHA-256 of the checkpoint JSON.
pub fn checkpoint_id(params: &NetworkParams) -> Result<String, TrainError> {
    let json = checkpoint::to_json(params)?;
    Ok(hex::encode(&Sha256::digest(json.as_bytes())[..8]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictions {
    Labels(Vec<usize>),
    Values(Vec<f64>),
}

impl Predictions {
    pub fn labels(&self) -> Option<&[usize]> {
        match self {
            Predictions::Labels(l) => Some(l),
            Predictions::Values(_) => None,
        }
    }

    pub fn values(&self) -> Option<&[f64]> {
        match self {
            Predictions::Values(v) => Some(v),
            Predictions::Labels(_) => None,
        }
    }
}

/// Row-wise argmax, ties to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

fn predictions_from_logits(spec: &NetworkSpec, logits: &Tensor) -> Predictions {
    match spec.head {
        Head::Classifier { .. } => Predictions::Labels(argmax_rows(logits)),
        Head::Regressor => Predictions::Values(logits.data().to_vec()),
    }
}

pub fn predict(
    params: &NetworkParams,
    spec: &NetworkSpec,
    images: &[LabeledImage],
    occlusion: Occlusion,
) -> Result<Predictions, TrainError> {
    let batch = all_batch(images, occlusion)?;
    let out = nn::evaluate(params, spec, &batch, EVAL_CHUNK)?;
    Ok(predictions_from_logits(spec, &out.logits))
}

/// Error rate or MAE of `pred` against the images' targets.
pub fn task_metric(pred: &Predictions, images: &[LabeledImage]) -> Result<f64, TrainError> {
    let mismatch = || TrainError::DataMismatch("predictions do not match targets".into());
    match pred {
        Predictions::Labels(labels) => {
            let truth: Vec<usize> = images
                .iter()
                .map(|i| i.target.class_id())
                .collect::<Option<_>>()
                .ok_or_else(mismatch)?;
            let acc = crate::stats::accuracy(labels, &truth).map_err(|_| mismatch())?;
            Ok(1.0 - acc)
        }
        Predictions::Values(values) => {
            let truth: Vec<f64> = images.iter().map(|i| i.target.value()).collect();
            crate::stats::mae(values, &truth).map_err(|_| mismatch())
        }
    }
}

/// Mean task loss computed directly from logits.
fn plain_task_loss(logits: &Tensor, targets: &Targets) -> Result<f64, TrainError> {
    match targets {
        Targets::Classes { labels, .. } => {
            let k = *logits.shape().last().unwrap_or(&1);
            let mut total = 0.0;
            for (row, &y) in logits.data().chunks(k).zip(labels) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - row[y];
            }
            Ok(total / labels.len() as f64)
        }
        Targets::Values(values) => Ok(logits
            .data()
            .iter()
            .zip(values)
            .map(|(p, t)| (p - t).abs())
            .sum::<f64>()
            / values.len() as f64),
    }
}

fn check_data(cfg: &RunConfig, data: &DatasetSplit) -> Result<(), TrainError> {
    if data.task != cfg.task {
        return Err(TrainError::DataMismatch(format!(
            "dataset task {:?} but config task {:?}",
            data.task, cfg.task
        )));
    }
    data.validate()?;
    for img in data.train.iter().chain(&data.validation).chain(&data.test) {
        if img.occlusion != Occlusion::None {
            return Err(TrainError::DataMismatch("dataset images must be stored unoccluded".into()));
        }
    }
    let [c, h, w] = cfg.spec.input_shape;
    if data.image_size() != Some((h, w)) || c != 1 {
        return Err(TrainError::DataMismatch(format!(
            "images are {:?}, network expects {:?}",
            data.image_size(),
            cfg.spec.input_shape
        )));
    }
    if data.train.is_empty() || data.validation.is_empty() {
        return Err(TrainError::DataMismatch("train and validation splits must be non-empty".into()));
    }
    Ok(())
}

/// What a stage optimizes, with any frozen teacher outputs precomputed over
/// the training set.
enum Objective<'a> {
    Task,
    StandardKd { teacher_logits: Tensor },
    HintKd { teacher_hints: Tensor },
    TripletKd { teacher: &'a NetworkParams, teacher_emb: Tensor },
}

fn gather_rows(t: &Tensor, idx: &[usize]) -> Result<Tensor, TrainError> {
    let mut shape = t.shape().to_vec();
    let width: usize = shape[1..].iter().product();
    shape[0] = idx.len();
    let mut data = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
    }
    Ok(Tensor::new(shape, data)?)
}

struct StageInput<'a> {
    stage: u8,
    cfg: &'a RunConfig,
    data: &'a DatasetSplit,
    init: NetworkParams,
    occlusion: Occlusion,
    objective: Objective<'a>,
}

fn stage_seed(cfg: &RunConfig, stage: u8) -> u64 {
    cfg.seed ^ (u64::from(stage) << 56) ^ 0x5EED_0000_0000_0000
}

fn run_stage(input: StageInput<'_>) -> Result<(NetworkParams, StageReport), TrainError> {
    let StageInput {
        stage,
        cfg,
        data,
        init,
        occlusion,
        objective,
    } = input;
    let idx = usize::from(stage - 1);
    let epochs = cfg.stage_epochs[idx];
    let spec = &cfg.spec;
    let mut params = init;
    let mut best: Option<(f64, usize, NetworkParams)> = None;
    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.weight_decay);
    let mut schedule = PlateauSchedule::new(cfg.lr[idx], cfg.lr_patience);
    let mut rng = ChaCha8Rng::seed_from_u64(stage_seed(cfg, stage));
    let mut records = Vec::with_capacity(epochs);
    let mut mining_calls = 0;

    let train = &data.train;
    let val_batch = all_batch(&data.validation, occlusion)?;
    let val_targets = Targets::from_images(cfg.task, &data.validation)?;
    let mut mining_cfg = cfg.mining;
    mining_cfg.seed ^= cfg.seed;

    for epoch in 0..epochs {
        let lr = schedule.lr();
        let (batches, triplets): (Vec<Vec<usize>>, Option<Vec<Triplet>>) = match &objective {
            Objective::TripletKd { teacher, .. } => {
                let t = mining::mine_epoch(&params, teacher, spec, train, occlusion, &mining_cfg, epoch as u64)?;
                mining_calls += 1;
                let positions: Vec<usize> = (0..t.len()).collect();
                let batches = positions.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect();
                (batches, Some(t))
            }
            _ => {
                let mut order: Vec<usize> = (0..train.len()).collect();
                order.shuffle(&mut rng);
                (order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect(), None)
            }
        };

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for batch in &batches {
            let mut g = Graph::new();
            let bound = BoundParams::bind(&mut g, &params, true);
            let loss = match (&objective, &triplets) {
                (Objective::TripletKd { teacher_emb, .. }, Some(all)) => {
                    let chosen: Vec<&Triplet> = batch.iter().map(|&k| &all[k]).collect();
                    let anchors: Vec<usize> = chosen.iter().map(|t| t.anchor_idx).collect();
                    let negatives: Vec<usize> = chosen.iter().map(|t| t.negative_idx).collect();
                    let positives: Vec<usize> = chosen.iter().map(|t| t.positive_idx).collect();
                    let xa = g.constant(gather_batch(train, &anchors, occlusion)?);
                    let xn = g.constant(gather_batch(train, &negatives, occlusion)?);
                    let out_a = nn::forward(&mut g, &bound, spec, xa)?;
                    let out_n = nn::forward(&mut g, &bound, spec, xn)?;
                    let targets = Targets::from_images(cfg.task, anchors.iter().map(|&i| &train[i]))?;
                    losses::triplet_kd_loss(
                        &mut g,
                        out_a.embedding,
                        &gather_rows(teacher_emb, &positives)?,
                        out_n.embedding,
                        out_a.logits,
                        &targets,
                        &cfg.distill,
                    )?
                }
                _ => {
                    let x = g.constant(gather_batch(train, batch, occlusion)?);
                    let out = nn::forward(&mut g, &bound, spec, x)?;
                    let targets = Targets::from_images(cfg.task, batch.iter().map(|&i| &train[i]))?;
                    match &objective {
                        Objective::Task => losses::task_loss(&mut g, out.logits, &targets)?,
                        Objective::StandardKd { teacher_logits } => losses::standard_kd_loss(
                            &mut g,
                            out.logits,
                            &gather_rows(teacher_logits, batch)?,
                            &targets,
                            &cfg.distill,
                        )?,
                        Objective::HintKd { teacher_hints } => losses::hint_kd_loss(
                            &mut g,
                            out.hint,
                            &gather_rows(teacher_hints, batch)?,
                            out.logits,
                            &targets,
                            &cfg.distill,
                        )?,
                        Objective::TripletKd { .. } => unreachable!("triplets are mined every epoch"),
                    }
                }
            };
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(TrainError::Divergence { stage, epoch, value });
            }
            g.backward(loss)?;
            let grads = bound.grads(&g);
            optimizer.step(&mut params, &grads, lr);
            loss_sum += value * batch.len() as f64;
            seen += batch.len();
        }

        let val_logits = nn::evaluate(&params, spec, &val_batch, EVAL_CHUNK)?.logits;
        let val_loss = plain_task_loss(&val_logits, &val_targets)?;
        let val_metric = task_metric(&predictions_from_logits(spec, &val_logits), &data.validation)?;
        if !val_loss.is_finite() || !val_metric.is_finite() {
            return Err(TrainError::Divergence {
                stage,
                epoch,
                value: val_loss,
            });
        }
        records.push(EpochRecord {
            stage,
            epoch,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            val_loss,
            val_metric,
        });
        schedule.observe(val_metric);
        if best.as_ref().map_or(true, |(m, _, _)| val_metric < *m) {
            best = Some((val_metric, epoch, params.clone()));
        }
    }

    let (best_epoch, out) = match best {
        Some((_, e, p)) => (Some(e), p),
        None => (None, params),
    };
    let report = StageReport {
        stage,
        lr_trace: records.iter().map(|r| r.lr).collect(),
        epochs: records,
        best_epoch,
        mining_calls,
        checkpoint_id: checkpoint_id(&out)?,
    };
    Ok((out, report))
}

/// Train a freshly initialized teacher on fully-visible images with the
/// task loss. Regression heads start at the mean training target.
pub fn train_stage1_teacher(cfg: &RunConfig, data: &DatasetSplit) -> Result<(NetworkParams, StageReport), TrainError> {
    cfg.validate()?;
    check_data(cfg, data)?;
    let mut init = nn::build(&cfg.spec, cfg.seed, Role::Teacher)?;
    if cfg.task.is_regression() {
        let mean = data.train.iter().map(|i| i.target.value()).sum::<f64>() / data.train.len() as f64;
        if let Some(b) = init.tensors.get_mut("head.b") {
            b.data_mut().iter_mut().for_each(|v| *v = mean);
        }
    }
    run_stage(StageInput {
        stage: 1,
        cfg,
        data,
        init,
        occlusion: cfg.occlusion[0],
        objective: Objective::Task,
    })
}

/// Fine-tune a copy of the teacher on occluded images with the task loss.
pub fn train_stage2_student(
    teacher: &NetworkParams,
    cfg: &RunConfig,
    data: &DatasetSplit,
) -> Result<(NetworkParams, StageReport), TrainError> {
    cfg.validate()?;
    check_data(cfg, data)?;
    teacher.check_against(&cfg.spec)?;
    run_stage(StageInput {
        stage: 2,
        cfg,
        data,
        init: teacher.with_role(Role::Student),
        occlusion: cfg.occlusion[1],
        objective: Objective::Task,
    })
}

/// Distill the frozen teacher into the stage-2 student using
/// `cfg.distill.mode`.
pub fn train_stage3_distill(
    teacher: &NetworkParams,
    student: &NetworkParams,
    cfg: &RunConfig,
    data: &DatasetSplit,
) -> Result<(NetworkParams, StageReport), TrainError> {
    cfg.validate()?;
    check_data(cfg, data)?;
    teacher.check_against(&cfg.spec)?;
    student.check_against(&cfg.spec)?;
    if cfg.distill.mode == DistillMode::StandardKd && cfg.task.is_regression() {
        return Err(TrainError::Incompatible {
            mode: cfg.distill.mode,
            task: cfg.task,
        });
    }
    let full = all_batch(&data.train, Occlusion::None)?;
    let objective = match cfg.distill.mode {
        DistillMode::StandardKd => Objective::StandardKd {
            teacher_logits: nn::evaluate(teacher, &cfg.spec, &full, EVAL_CHUNK)?.logits,
        },
        DistillMode::HintKd => Objective::HintKd {
            teacher_hints: nn::evaluate(teacher, &cfg.spec, &full, EVAL_CHUNK)?.hint,
        },
        DistillMode::TripletKd => Objective::TripletKd {
            teacher,
            teacher_emb: nn::evaluate(teacher, &cfg.spec, &full, EVAL_CHUNK)?.embedding,
        },
    };
    run_stage(StageInput {
        stage: 3,
        cfg,
        data,
        init: student.with_role(Role::Student),
        occlusion: cfg.occlusion[2],
        objective,
    })
}

/// Outputs of all three stages.
#[derive(Debug, Clone)]
pub struct CurriculumOutput {
    pub teacher: NetworkParams,
    pub student: NetworkParams,
    pub distilled: NetworkParams,
    pub reports: [StageReport; 3],
}

pub fn run_curriculum(cfg: &RunConfig, data: &DatasetSplit) -> Result<CurriculumOutput, TrainError> {
    let (teacher, r1) = train_stage1_teacher(cfg, data)?;
    let (student, r2) = train_stage2_student(&teacher, cfg, data)?;
    let (distilled, r3) = train_stage3_distill(&teacher, &student, cfg, data)?;
    Ok(CurriculumOutput {
        teacher,
        student,
        distilled,
        reports: [r1, r2, r3],
    })
}
