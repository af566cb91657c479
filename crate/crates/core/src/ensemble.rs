//! Linear max-margin models on concatenated student embeddings.
//!
//! Classification uses a hinge-loss SVM (one-vs-rest above two classes),
//! regression an ε-insensitive SVR with ε = 0. Both are trained by
//! Pegasos-style stochastic subgradient descent on
//! `λ/2 ‖w‖² + mean(loss)` with `λ = 1 / (C · n)` and step `1 / (λ t)`.
//! The bias is the weight of a constant-1 feature. The iterate with the
//! lowest objective seen at an epoch boundary is kept.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{all_batch, DataError, LabeledImage, Occlusion, Target, TaskKind};
use crate::nn::{self, NetworkParams, NetworkSpec, NnError};
use crate::trainer::Predictions;

pub const DEFAULT_C_GRID: [f64; 5] = [0.1, 1.0, 10.0, 100.0, 1000.0];
pub const DEFAULT_EPOCHS: usize = 200;
const EXTRACT_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EnsembleError {
    #[error("row count mismatch: {0} vs {1}")]
    RowMismatch(usize, usize),
    #[error("targets of row {0} differ between embedding sets")]
    TargetMismatch(usize),
    #[error("embedding matrix has {len} values, not a multiple of width {dim}")]
    Shape { len: usize, dim: usize },
    #[error("model expects {expected} features, got {got}")]
    FeatureMismatch { expected: usize, got: usize },
    #[error("empty embedding set")]
    Empty,
    #[error("training labels contain a single class")]
    DegenerateLabels,
    #[error("target {0:?} does not fit the model kind")]
    WrongTarget(Target),
    #[error("C grid is empty")]
    EmptyGrid,
    #[error("C must be positive and finite, got {0}")]
    InvalidC(f64),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Which distilled student a block of embedding columns came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSource {
    StandardKd,
    HintKd,
    TripletKd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnBlock {
    pub source: EmbeddingSource,
    pub width: usize,
}

/// Row-major `n × dim` embedding matrix with one target per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSet {
    dim: usize,
    values: Vec<f64>,
    blocks: Vec<ColumnBlock>,
    targets: Vec<Target>,
}

impl EmbeddingSet {
    pub fn new(values: Vec<f64>, dim: usize, source: EmbeddingSource, targets: Vec<Target>) -> Result<Self, EnsembleError> {
        if dim == 0 || values.len() % dim != 0 {
            return Err(EnsembleError::Shape { len: values.len(), dim });
        }
        if values.len() / dim != targets.len() {
            return Err(EnsembleError::RowMismatch(values.len() / dim, targets.len()));
        }
        Ok(Self {
            dim,
            values,
            blocks: vec![ColumnBlock { source, width: dim }],
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn blocks(&self) -> &[ColumnBlock] {
        &self.blocks
    }

    pub fn targets(&self) -> &[Target] {
        &self.targets
    }

    /// Column-wise concatenation `[self | other]`; rows must line up.
    pub fn concat(&self, other: &EmbeddingSet) -> Result<Self, EnsembleError> {
        if self.len() != other.len() {
            return Err(EnsembleError::RowMismatch(self.len(), other.len()));
        }
        if let Some(i) = (0..self.len()).find(|&i| self.targets[i] != other.targets[i]) {
            return Err(EnsembleError::TargetMismatch(i));
        }
        let dim = self.dim + other.dim;
        let mut values = Vec::with_capacity(self.len() * dim);
        for i in 0..self.len() {
            values.extend_from_slice(self.row(i));
            values.extend_from_slice(other.row(i));
        }
        Ok(Self {
            dim,
            values,
            blocks: self.blocks.iter().chain(&other.blocks).copied().collect(),
            targets: self.targets.clone(),
        })
    }

    /// Rows reordered so that row `i` of the result is row `order[i]`.
    pub fn select_rows(&self, order: &[usize]) -> Self {
        Self {
            dim: self.dim,
            values: order.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            blocks: self.blocks.clone(),
            targets: order.iter().map(|&i| self.targets[i]).collect(),
        }
    }
}

/// Penultimate activations of `images` (occluded by `occlusion`), one row
/// per image.
pub fn extract_embeddings(
    params: &NetworkParams,
    spec: &NetworkSpec,
    images: &[LabeledImage],
    occlusion: Occlusion,
    source: EmbeddingSource,
) -> Result<EmbeddingSet, EnsembleError> {
    if images.is_empty() {
        return Err(EnsembleError::Empty);
    }
    let batch = all_batch(images, occlusion)?;
    let out = nn::evaluate(params, spec, &batch, EXTRACT_CHUNK)?;
    let dim = out.embedding.shape()[1];
    EmbeddingSet::new(
        out.embedding.into_data(),
        dim,
        source,
        images.iter().map(|i| i.target).collect(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MarginKind {
    HingeClassifier { num_classes: usize },
    EpsilonRegressor,
}

impl MarginKind {
    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Classification { num_classes } => MarginKind::HingeClassifier { num_classes },
            TaskKind::Regression => MarginKind::EpsilonRegressor,
        }
    }

    /// Number of weight rows: one for binary and regression, one per class
    /// otherwise.
    fn outputs(self) -> usize {
        match self {
            MarginKind::HingeClassifier { num_classes } if num_classes > 2 => num_classes,
            _ => 1,
        }
    }
}

/// Per-feature z-score fitted on the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    fn fit(set: &EmbeddingSet) -> Self {
        let n = set.len() as f64;
        let mut mean = vec![0.0; set.dim()];
        for i in 0..set.len() {
            for (m, v) in mean.iter_mut().zip(set.row(i)) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; set.dim()];
        for i in 0..set.len() {
            for ((s, v), m) in var.iter_mut().zip(set.row(i)).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let std = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, std }
    }

    fn apply(&self, row: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearMarginModel {
    pub kind: MarginKind,
    #[serde(rename = "C")]
    pub c: f64,
    /// One row per output, each of the embedding width.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaler: Option<Scaler>,
}

impl LinearMarginModel {
    pub fn dim(&self) -> usize {
        self.weights.first().map_or(0, Vec::len)
    }

    fn scores(&self, row: &[f64], buf: &mut Vec<f64>, out: &mut Vec<f64>) {
        let x = match &self.scaler {
            Some(s) => {
                s.apply(row, buf);
                buf.as_slice()
            }
            None => row,
        };
        out.clear();
        out.extend(self.weights.iter().zip(&self.bias).map(|(w, b)| dot(w, x) + b));
    }

    pub fn predict(&self, set: &EmbeddingSet) -> Result<Predictions, EnsembleError> {
        if set.dim() != self.dim() {
            return Err(EnsembleError::FeatureMismatch {
                expected: self.dim(),
                got: set.dim(),
            });
        }
        let mut buf = Vec::new();
        let mut s = Vec::new();
        Ok(match self.kind {
            MarginKind::EpsilonRegressor => Predictions::Values(
                (0..set.len())
                    .map(|i| {
                        self.scores(set.row(i), &mut buf, &mut s);
                        s[0]
                    })
                    .collect(),
            ),
            MarginKind::HingeClassifier { .. } => Predictions::Labels(
                (0..set.len())
                    .map(|i| {
                        self.scores(set.row(i), &mut buf, &mut s);
                        if s.len() == 1 {
                            usize::from(s[0] > 0.0)
                        } else {
                            argmax(&s)
                        }
                    })
                    .collect(),
            ),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = k;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginFitConfig {
    pub c_grid: Vec<f64>,
    pub epochs: usize,
    /// Z-score features with train statistics before fitting.
    pub standardize: bool,
    pub seed: u64,
}

impl Default for MarginFitConfig {
    fn default() -> Self {
        Self {
            c_grid: DEFAULT_C_GRID.to_vec(),
            epochs: DEFAULT_EPOCHS,
            standardize: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    #[serde(rename = "C")]
    pub c: f64,
    /// Validation error rate or MAE; lower is better.
    pub val_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub model: LinearMarginModel,
    pub points: Vec<GridPoint>,
}

/// One binary or regression sub-problem on augmented rows `[x, 1]`.
struct SubProblem<'a> {
    rows: &'a [Vec<f64>],
    /// `±1` for hinge, centred targets for regression.
    y: Vec<f64>,
    hinge: bool,
}

impl SubProblem<'_> {
    fn loss(&self, w: &[f64], i: usize) -> f64 {
        let s = dot(w, &self.rows[i]);
        if self.hinge {
            (1.0 - self.y[i] * s).max(0.0)
        } else {
            (s - self.y[i]).abs()
        }
    }

    fn objective(&self, w: &[f64], lambda: f64) -> f64 {
        let n = self.rows.len() as f64;
        let data: f64 = (0..self.rows.len()).map(|i| self.loss(w, i)).sum::<f64>() / n;
        0.5 * lambda * dot(w, w) + data
    }

    /// Pegasos with projection onto the ball that must contain the optimum.
    /// Returns the weights and the best objective at each epoch boundary.
    fn solve(&self, c: f64, epochs: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
        let n = self.rows.len();
        let d = self.rows[0].len();
        let lambda = 1.0 / (c * n as f64);
        let radius = (2.0 * self.objective(&vec![0.0; d], lambda) / lambda).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        let mut w = vec![0.0; d];
        let mut best = w.clone();
        let mut best_obj = self.objective(&w, lambda);
        let mut trace = Vec::with_capacity(epochs);
        let mut t = 0u64;
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for &i in &order {
                t += 1;
                let eta = 1.0 / (lambda * t as f64);
                let x = &self.rows[i];
                let s = dot(&w, x);
                let step = if self.hinge {
                    if self.y[i] * s < 1.0 {
                        eta * self.y[i]
                    } else {
                        0.0
                    }
                } else if s > self.y[i] {
                    -eta
                } else if s < self.y[i] {
                    eta
                } else {
                    0.0
                };
                let shrink = 1.0 - 1.0 / t as f64;
                for (wj, xj) in w.iter_mut().zip(x) {
                    *wj = *wj * shrink + step * xj;
                }
                let norm = dot(&w, &w).sqrt();
                if norm > radius {
                    let f = radius / norm;
                    w.iter_mut().for_each(|v| *v *= f);
                }
            }
            let obj = self.objective(&w, lambda);
            if obj < best_obj {
                best_obj = obj;
                best.clone_from(&w);
            }
            trace.push(best_obj);
        }
        (best, trace)
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Fit at a single `C`. Also returns the per-output objective traces.
pub fn fit_at_c(
    train: &EmbeddingSet,
    kind: MarginKind,
    c: f64,
    cfg: &MarginFitConfig,
) -> Result<(LinearMarginModel, Vec<Vec<f64>>), EnsembleError> {
    if !(c.is_finite() && c > 0.0) {
        return Err(EnsembleError::InvalidC(c));
    }
    if train.is_empty() {
        return Err(EnsembleError::Empty);
    }
    let scaler = cfg.standardize.then(|| Scaler::fit(train));
    let mut buf = Vec::new();
    let rows: Vec<Vec<f64>> = (0..train.len())
        .map(|i| {
            let mut x = match &scaler {
                Some(s) => {
                    s.apply(train.row(i), &mut buf);
                    buf.clone()
                }
                None => train.row(i).to_vec(),
            };
            x.push(1.0);
            x
        })
        .collect();
    let mut weights = Vec::new();
    let mut bias = Vec::new();
    let mut traces = Vec::new();
    let mut push = |sol: Vec<f64>, trace: Vec<f64>, offset: f64| {
        let (b, w) = sol.split_last().expect("augmented row");
        weights.push(w.to_vec());
        bias.push(b + offset);
        traces.push(trace);
    };
    match kind {
        MarginKind::EpsilonRegressor => {
            let y: Vec<f64> = train.targets().iter().map(Target::value).collect();
            let m = median(&y);
            let p = SubProblem {
                rows: &rows,
                y: y.iter().map(|v| v - m).collect(),
                hinge: false,
            };
            let (sol, trace) = p.solve(c, cfg.epochs, cfg.seed);
            push(sol, trace, m);
        }
        MarginKind::HingeClassifier { num_classes } => {
            let labels: Vec<usize> = train
                .targets()
                .iter()
                .map(|t| match t.class_id() {
                    Some(k) if k < num_classes => Ok(k),
                    _ => Err(EnsembleError::WrongTarget(*t)),
                })
                .collect::<Result<_, _>>()?;
            if labels.iter().all(|&k| k == labels[0]) {
                return Err(EnsembleError::DegenerateLabels);
            }
            let positives: Vec<usize> = if kind.outputs() == 1 { vec![1] } else { (0..num_classes).collect() };
            for k in positives {
                let p = SubProblem {
                    rows: &rows,
                    y: labels.iter().map(|&l| if l == k { 1.0 } else { -1.0 }).collect(),
                    hinge: true,
                };
                let (sol, trace) = p.solve(c, cfg.epochs, cfg.seed);
                push(sol, trace, 0.0);
            }
        }
    }
    Ok((
        LinearMarginModel {
            kind,
            c,
            weights,
            bias,
            scaler,
        },
        traces,
    ))
}

fn validation_metric(model: &LinearMarginModel, val: &EmbeddingSet) -> Result<f64, EnsembleError> {
    let pred = model.predict(val)?;
    let n = val.len() as f64;
    Ok(match pred {
        Predictions::Labels(labels) => {
            let wrong = labels
                .iter()
                .zip(val.targets())
                .filter(|(p, t)| t.class_id() != Some(**p))
                .count();
            wrong as f64 / n
        }
        Predictions::Values(values) => {
            values.iter().zip(val.targets()).map(|(p, t)| (p - t.value()).abs()).sum::<f64>() / n
        }
    })
}

/// Fit on `train` at every `C` in the grid and keep the one with the best
/// validation metric; ties go to the smaller `C`.
pub fn fit_margin_model(
    train: &EmbeddingSet,
    val: &EmbeddingSet,
    kind: MarginKind,
    cfg: &MarginFitConfig,
) -> Result<GridSearch, EnsembleError> {
    if cfg.c_grid.is_empty() {
        return Err(EnsembleError::EmptyGrid);
    }
    if val.is_empty() {
        return Err(EnsembleError::Empty);
    }
    if train.dim() != val.dim() {
        return Err(EnsembleError::FeatureMismatch {
            expected: train.dim(),
            got: val.dim(),
        });
    }
    let mut grid = cfg.c_grid.clone();
    if let Some(&bad) = grid.iter().find(|c| !(c.is_finite() && **c > 0.0)) {
        return Err(EnsembleError::InvalidC(bad));
    }
    grid.sort_by(f64::total_cmp);
    let mut points = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, LinearMarginModel)> = None;
    for &c in &grid {
        let (model, _) = fit_at_c(train, kind, c, cfg)?;
        let metric = validation_metric(&model, val)?;
        points.push(GridPoint { c, val_metric: metric });
        if best.as_ref().map_or(true, |(m, _)| metric < *m) {
            best = Some((metric, model));
        }
    }
    let (_, model) = best.expect("non-empty grid");
    Ok(GridSearch { model, points })
}

/// Concatenate the standard-KD and triplet-KD embeddings row-wise and apply
/// `model`.
pub fn ensemble_predict(
    model: &LinearMarginModel,
    emb_std: &EmbeddingSet,
    emb_tl: &EmbeddingSet,
) -> Result<Predictions, EnsembleError> {
    model.predict(&emb_std.concat(emb_tl)?)
}
