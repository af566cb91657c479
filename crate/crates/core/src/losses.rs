//! Differentiable training objectives.
//!
//! All losses take the student side as graph [`Var`]s and every
//! teacher-produced quantity as a plain [`Tensor`], so nothing computed by
//! the teacher can ever receive a gradient. Batch losses are means over the
//! batch.
//!
//! | loss | value |
//! |------|-------|
//! | [`task_loss`] | cross-entropy `−log p[y]` or `|ŷ − y|` |
//! | [`standard_kd_loss`] | `λ·CE(softmax(A_T/τ), softmax(A_S/τ)) + (1−λ)·CE(y, softmax(A_S))` |
//! | [`hint_kd_loss`] | `λ·‖H_T − H_S‖₁ + (1−λ)·task` |
//! | [`triplet_term`] | `max(0, ‖E_S(a′)−E_T(p)‖² − ‖E_S(a′)−E_S(n′)‖² + α)` |
//! | [`triplet_kd_loss`] | `(1−λ)·task + λ·reduce(triplet terms)` |
//!
//! The soft cross-entropy is not rescaled by `τ²`.

use serde::{Deserialize, Serialize};

use crate::autograd::{AutogradError, Graph, Tensor, Var};
use crate::data::{LabeledImage, Target, TaskKind};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LossError {
    #[error("{loss} called with distill mode {mode:?}")]
    ModeMismatch {
        loss: &'static str,
        mode: DistillMode,
    },
    #[error("target {target} out of range for {num_classes} classes")]
    TargetOutOfRange { target: usize, num_classes: usize },
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("targets do not match the task")]
    TaskMismatch,
    #[error("empty batch")]
    EmptyBatch,
    #[error("invalid distill config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillMode {
    StandardKd,
    HintKd,
    TripletKd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletReduction {
    /// Divide the triplet sum by the number of triplets.
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub mode: DistillMode,
    pub lambda: f64,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub margin_alpha: f64,
    #[serde(default)]
    pub triplet_reduction: TripletReduction,
    #[serde(default)]
    pub normalize_embeddings: bool,
}

fn default_tau() -> f64 {
    1.0
}

impl DistillConfig {
    pub fn standard(lambda: f64, tau: f64) -> Self {
        Self {
            mode: DistillMode::StandardKd,
            lambda,
            tau,
            margin_alpha: 0.0,
            triplet_reduction: TripletReduction::Mean,
            normalize_embeddings: false,
        }
    }

    pub fn hint(lambda: f64) -> Self {
        Self {
            mode: DistillMode::HintKd,
            ..Self::standard(lambda, 1.0)
        }
    }

    pub fn triplet(lambda: f64, margin_alpha: f64) -> Self {
        Self {
            mode: DistillMode::TripletKd,
            margin_alpha,
            ..Self::standard(lambda, 1.0)
        }
    }

    /// Range checks; the error names the offending field.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(("lambda", format!("must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.tau >= 1.0) || !self.tau.is_finite() {
            return Err(("tau", format!("must be >= 1, got {}", self.tau)));
        }
        if !(self.margin_alpha >= 0.0) || !self.margin_alpha.is_finite() {
            return Err((
                "margin_alpha",
                format!("must be >= 0, got {}", self.margin_alpha),
            ));
        }
        Ok(())
    }

    fn require(&self, loss: &'static str, mode: DistillMode) -> Result<(), LossError> {
        if self.mode != mode {
            return Err(LossError::ModeMismatch {
                loss,
                mode: self.mode,
            });
        }
        self.validate()
            .map_err(|(field, msg)| LossError::InvalidConfig(format!("{field}: {msg}")))
    }
}

/// Batch targets.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Classes { labels: Vec<usize>, num_classes: usize },
    Values(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Values(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn from_images<'a>(
        task: TaskKind,
        images: impl IntoIterator<Item = &'a LabeledImage>,
    ) -> Result<Self, LossError> {
        match task {
            TaskKind::Classification { num_classes } => {
                let labels = images
                    .into_iter()
                    .map(|img| img.target.class_id().ok_or(LossError::TaskMismatch))
                    .collect::<Result<_, _>>()?;
                Ok(Targets::Classes {
                    labels,
                    num_classes,
                })
            }
            TaskKind::Regression => {
                let values = images
                    .into_iter()
                    .map(|img| match img.target {
                        Target::AgeLike(v) => Ok(v),
                        Target::ClassId(_) => Err(LossError::TaskMismatch),
                    })
                    .collect::<Result<_, _>>()?;
                Ok(Targets::Values(values))
            }
        }
    }
}

fn expect_shape(g: &Graph, v: Var, what: &'static str, expected: &[usize]) -> Result<(), LossError> {
    if g.shape(v) != expected {
        return Err(LossError::Shape {
            what,
            expected: expected.to_vec(),
            got: g.shape(v).to_vec(),
        });
    }
    Ok(())
}

fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor, LossError> {
    let mut data = vec![0.0; labels.len() * num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(LossError::TargetOutOfRange {
                target: y,
                num_classes,
            });
        }
        data[i * num_classes + y] = 1.0;
    }
    Ok(Tensor::new(vec![labels.len(), num_classes], data)?)
}

/// `−mean_i Σ_c target[i,c] · log softmax(logits[i] / tau)[c]`.
fn soft_cross_entropy(g: &mut Graph, logits: Var, target: Tensor, tau: f64) -> Result<Var, LossError> {
    let n = g.shape(logits)[0];
    let log_p = g.log_softmax(logits, tau)?;
    let t = g.constant(target);
    let prod = g.mul(log_p, t)?;
    let total = g.sum(prod, None)?;
    Ok(g.scale(total, -1.0 / n as f64))
}

/// Mean cross-entropy from logits `(n, k)`, or mean absolute error for a
/// regressor's `(n, 1)` outputs.
pub fn task_loss(g: &mut Graph, logits: Var, targets: &Targets) -> Result<Var, LossError> {
    let n = targets.len();
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    match targets {
        Targets::Classes {
            labels,
            num_classes,
        } => {
            expect_shape(g, logits, "logits", &[n, *num_classes])?;
            soft_cross_entropy(g, logits, one_hot(labels, *num_classes)?, 1.0)
        }
        Targets::Values(values) => {
            expect_shape(g, logits, "regression output", &[n, 1])?;
            let pred = g.sum(logits, Some(1))?;
            let t = g.constant(Tensor::vector(values.clone()));
            let diff = g.sub(pred, t)?;
            let abs = g.abs(diff);
            Ok(g.mean(abs, None)?)
        }
    }
}

fn mix(g: &mut Graph, lambda: f64, distill: Var, task: Var) -> Result<Var, LossError> {
    let a = g.scale(distill, lambda);
    let b = g.scale(task, 1.0 - lambda);
    Ok(g.add(a, b)?)
}

/// Soft-target cross-entropy against the teacher's tempered distribution
/// plus hard-label cross-entropy, mixed by λ.
pub fn standard_kd_loss(
    g: &mut Graph,
    student_logits: Var,
    teacher_logits: &Tensor,
    targets: &Targets,
    cfg: &DistillConfig,
) -> Result<Var, LossError> {
    cfg.require("standard_kd_loss", DistillMode::StandardKd)?;
    let Targets::Classes { num_classes, .. } = targets else {
        return Err(LossError::TaskMismatch);
    };
    let shape = [targets.len(), *num_classes];
    expect_shape(g, student_logits, "student logits", &shape)?;
    if teacher_logits.shape() != shape {
        return Err(LossError::Shape {
            what: "teacher logits",
            expected: shape.to_vec(),
            got: teacher_logits.shape().to_vec(),
        });
    }
    let mut soft = Vec::with_capacity(teacher_logits.len());
    for row in teacher_logits.data().chunks(*num_classes) {
        soft.extend(crate::autograd::softmax_with_temperature(row, cfg.tau)?);
    }
    let soft = Tensor::new(shape.to_vec(), soft)?;
    let distill = soft_cross_entropy(g, student_logits, soft, cfg.tau)?;
    let task = task_loss(g, student_logits, targets)?;
    mix(g, cfg.lambda, distill, task)
}

/// L1 distance between hint activations (summed over features, averaged
/// over the batch) plus the task loss, mixed by λ.
pub fn hint_kd_loss(
    g: &mut Graph,
    student_hint: Var,
    teacher_hint: &Tensor,
    student_logits: Var,
    targets: &Targets,
    cfg: &DistillConfig,
) -> Result<Var, LossError> {
    cfg.require("hint_kd_loss", DistillMode::HintKd)?;
    if g.shape(student_hint) != teacher_hint.shape() {
        return Err(LossError::Shape {
            what: "hint",
            expected: teacher_hint.shape().to_vec(),
            got: g.shape(student_hint).to_vec(),
        });
    }
    let n = g.shape(student_hint).first().copied().unwrap_or(1);
    let t = g.constant(teacher_hint.clone());
    let diff = g.sub(t, student_hint)?;
    let abs = g.abs(diff);
    let total = g.sum(abs, None)?;
    let hint = g.scale(total, 1.0 / n as f64);
    let task = task_loss(g, student_logits, targets)?;
    mix(g, cfg.lambda, hint, task)
}

/// Per-triplet hinge values. Works row-wise on `(m, d)` batches or on single
/// `(d)` vectors (rank-0 result). The positive comes from the teacher and is
/// constant.
pub fn triplet_term(
    g: &mut Graph,
    anchor: Var,
    positive: &Tensor,
    negative: Var,
    alpha: f64,
) -> Result<Var, LossError> {
    let shape = g.shape(anchor).to_vec();
    for (what, s) in [("positive embedding", positive.shape()), ("negative embedding", g.shape(negative))] {
        if s != shape.as_slice() {
            return Err(LossError::Shape {
                what,
                expected: shape.clone(),
                got: s.to_vec(),
            });
        }
    }
    let p = g.constant(positive.clone());
    let d_pos = g.squared_l2_distance(anchor, p)?;
    let d_neg = g.squared_l2_distance(anchor, negative)?;
    let gap = g.sub(d_pos, d_neg)?;
    let margin = g.constant(Tensor::filled(g.shape(gap), alpha));
    let raw = g.add(gap, margin)?;
    Ok(g.relu(raw))
}

/// `(1−λ)·task(anchor logits) + λ·reduce(triplet terms)`.
#[allow(clippy::too_many_arguments)]
pub fn triplet_kd_loss(
    g: &mut Graph,
    anchor_emb: Var,
    positive_emb: &Tensor,
    negative_emb: Var,
    anchor_logits: Var,
    targets: &Targets,
    cfg: &DistillConfig,
) -> Result<Var, LossError> {
    cfg.require("triplet_kd_loss", DistillMode::TripletKd)?;
    if targets.is_empty() || g.shape(anchor_emb).len() != 2 {
        return Err(LossError::EmptyBatch);
    }
    let m = g.shape(anchor_emb)[0];
    let (anchor, negative, positive) = if cfg.normalize_embeddings {
        let a = g.l2_normalize_rows(anchor_emb)?;
        let n = g.l2_normalize_rows(negative_emb)?;
        let mut p = positive_emb.clone();
        let d = *p.shape().last().unwrap_or(&1);
        for row in p.data_mut().chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm >= 1e-12 {
                row.iter_mut().for_each(|v| *v /= norm);
            }
        }
        (a, n, p)
    } else {
        (anchor_emb, negative_emb, positive_emb.clone())
    };
    let terms = triplet_term(g, anchor, &positive, negative, cfg.margin_alpha)?;
    let total = g.sum(terms, None)?;
    let triplet = match cfg.triplet_reduction {
        TripletReduction::Mean => g.scale(total, 1.0 / m as f64),
        TripletReduction::Sum => total,
    };
    let task = task_loss(g, anchor_logits, targets)?;
    mix(g, cfg.lambda, triplet, task)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes(labels: &[usize], k: usize) -> Targets {
        Targets::Classes {
            labels: labels.to_vec(),
            num_classes: k,
        }
    }

    fn logits(g: &mut Graph, rows: &[&[f64]]) -> Var {
        let k = rows[0].len();
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        g.param(Tensor::new(vec![rows.len(), k], data).unwrap())
    }

    #[test]
    fn uniform_prediction_costs_ln_k() {
        let mut g = Graph::new();
        let z = logits(&mut g, &[&[0.0; 4]]);
        let l = task_loss(&mut g, z, &classes(&[2], 4)).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_prediction_costs_nothing() {
        let mut g = Graph::new();
        let z = logits(&mut g, &[&[60.0, 0.0, 0.0]]);
        let l = task_loss(&mut g, z, &classes(&[0], 3)).unwrap();
        assert!(g.value(l).item() < 1e-20);
    }

    #[test]
    fn mae_of_single_regression() {
        let mut g = Graph::new();
        let z = logits(&mut g, &[&[30.0]]);
        let l = task_loss(&mut g, z, &Targets::Values(vec![25.0])).unwrap();
        assert_eq!(g.value(l).item(), 5.0);
    }

    #[test]
    fn target_out_of_range() {
        let mut g = Graph::new();
        let z = logits(&mut g, &[&[0.0, 0.0]]);
        assert!(matches!(
            task_loss(&mut g, z, &classes(&[2], 2)),
            Err(LossError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn kd_of_identical_logits_is_entropy() {
        let mut g = Graph::new();
        let z = logits(&mut g, &[&[0.0, 0.0]]);
        let t = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let l = standard_kd_loss(&mut g, z, &t, &classes(&[0], 2), &DistillConfig::standard(1.0, 1.0)).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kd_rejects_wrong_mode() {
        let mut g = Graph::new();
        let z = logits(&mut g, &[&[0.0, 0.0]]);
        let t = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            standard_kd_loss(&mut g, z, &t, &classes(&[0], 2), &DistillConfig::hint(0.5)),
            Err(LossError::ModeMismatch { .. })
        ));
    }

    #[test]
    fn hint_l1_sum() {
        let mut g = Graph::new();
        let hs = g.param(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let ht = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let z = logits(&mut g, &[&[0.0, 0.0]]);
        let l = hint_kd_loss(&mut g, hs, &ht, z, &classes(&[0], 2), &DistillConfig::hint(1.0)).unwrap();
        assert_eq!(g.value(l).item(), 3.0);
    }

    #[test]
    fn hint_shape_mismatch() {
        let mut g = Graph::new();
        let hs = g.param(Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap());
        let ht = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let z = logits(&mut g, &[&[0.0, 0.0]]);
        assert!(matches!(
            hint_kd_loss(&mut g, hs, &ht, z, &classes(&[0], 2), &DistillConfig::hint(1.0)),
            Err(LossError::Shape { what: "hint", .. })
        ));
    }

    #[test]
    fn triplet_examples() {
        let cases = [
            ([0.0, 0.0], [1.0, 0.0], [0.0, 1.0], 0.0, 0.0),
            ([0.0, 0.0], [1.0, 0.0], [3.0, 0.0], 0.0, 0.0),
            ([0.0, 0.0], [2.0, 0.0], [1.0, 0.0], 0.5, 3.5),
        ];
        for (a, p, n, alpha, expected) in cases {
            let mut g = Graph::new();
            let av = g.param(Tensor::vector(a.to_vec()));
            let nv = g.param(Tensor::vector(n.to_vec()));
            let l = triplet_term(&mut g, av, &Tensor::vector(p.to_vec()), nv, alpha).unwrap();
            assert_eq!(g.value(l).item(), expected);
        }
    }

    #[test]
    fn triplet_gradient_skips_positive_and_reaches_negative() {
        let mut g = Graph::new();
        let a = g.param(Tensor::vector(vec![0.0, 0.0]));
        let n = g.param(Tensor::vector(vec![1.0, 0.0]));
        let l = triplet_term(&mut g, a, &Tensor::vector(vec![2.0, 0.0]), n, 0.5).unwrap();
        g.backward(l).unwrap();
        // d/da (|a-p|² - |a-n|²) = 2(a-p) - 2(a-n) = 2(n - p)
        assert_eq!(g.grad(a).unwrap().data(), &[-2.0, 0.0]);
        // d/dn (-|a-n|²) = 2(a - n)
        assert_eq!(g.grad(n).unwrap().data(), &[-2.0, 0.0]);
    }

    #[test]
    fn triplet_kd_rejects_empty_and_dimension_mismatch() {
        let mut g = Graph::new();
        let a = g.param(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let n = g.param(Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap());
        let p = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let z = logits(&mut g, &[&[0.0, 0.0]]);
        assert!(triplet_kd_loss(&mut g, a, &p, n, z, &classes(&[0], 2), &DistillConfig::triplet(0.5, 0.1)).is_err());
        assert!(matches!(
            triplet_kd_loss(&mut g, a, &p, a, z, &classes(&[], 2), &DistillConfig::triplet(0.5, 0.1)),
            Err(LossError::EmptyBatch)
        ));
    }

    #[test]
    fn config_validation_names_field() {
        let mut cfg = DistillConfig::standard(1.5, 2.0);
        assert_eq!(cfg.validate().unwrap_err().0, "lambda");
        cfg.lambda = 0.5;
        cfg.tau = 0.5;
        assert_eq!(cfg.validate().unwrap_err().0, "tau");
    }
}
