//! Synthetic stand-in for the face datasets.
//!
//! Every image is `size × size` (default 16). The target is written into
//! both halves of the image with separate strengths, so how much signal each
//! half carries is a per-task choice:
//!
//! * `Expression` (multi-class): each class owns one random blob template per
//!   half. A sample of class `c` gets `0.5 + s_half · a · T[c][half]` plus
//!   Gaussian pixel noise, where `a ∈ [0.4, 1]` is a per-sample intensity
//!   shared by both halves and the whole pattern is shifted horizontally by
//!   up to one pixel. The upper half is the strong one
//!   (`s_upper = 0.50`, `s_lower = 0.15`), so full > upper-only > lower-only.
//! * `Gender` (two classes): same construction with the allocation mirrored
//!   (`s_upper = 0.15`, `s_lower = 0.50`), so the visible upper half is the
//!   weak one once the lower half is hidden.
//! * `Age` (regression): the age-like target `t` is uniform on `[20, 70]`.
//!   With `u = (t − 45) / 25 ∈ [−1, 1]`, each half shows `u · A[half]` over
//!   a random nuisance pattern, strengths as for `Gender`.
//!
//! `noise` drives both corruptions: the additive Gaussian pixel noise has
//! standard deviation `0.4 · noise` and a classification label is replaced
//! by a uniformly drawn class with probability `0.5 · noise` (labels only;
//! the pixels keep the true class). [`SyntheticConfig`] exposes the scales.
//! Label noise stands for annotation noise, so it applies to the train and
//! validation splits; test labels are the true classes.
//! Pixels are clipped to `[0, 1]` and quantized to multiples of `1/255`, so
//! an exported dataset reloads bit-exactly.
//!
//! Splits are 60/20/20, stratified by class. Everything is a pure function
//! of `(task, n, noise, seed)`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetSplit, TaskKind};
use super::image::{GrayImage, LabeledImage, Occlusion, Target};
use super::DataError;

pub const AGE_MIN: f64 = 20.0;
pub const AGE_MAX: f64 = 70.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticTask {
    Expression { num_classes: usize },
    Gender,
    Age,
}

impl SyntheticTask {
    pub fn task_kind(self) -> TaskKind {
        match self {
            SyntheticTask::Expression { num_classes } => TaskKind::Classification { num_classes },
            SyntheticTask::Gender => TaskKind::Classification { num_classes: 2 },
            SyntheticTask::Age => TaskKind::Regression,
        }
    }

    /// The occlusion the task is studied under: the strong half is hidden.
    pub fn default_occlusion(self) -> Occlusion {
        match self {
            SyntheticTask::Expression { .. } => Occlusion::UpperHalfHidden,
            SyntheticTask::Gender | SyntheticTask::Age => Occlusion::LowerHalfHidden,
        }
    }
}

/// Knobs of the generator; [`SyntheticConfig::for_task`] gives the defaults.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub size: usize,
    pub upper_strength: f64,
    pub lower_strength: f64,
    /// Pixel noise std is `noise * pixel_noise_scale`.
    pub pixel_noise_scale: f64,
    /// Label flip probability is `noise * label_noise_scale`.
    pub label_noise_scale: f64,
}

impl SyntheticConfig {
    pub fn for_task(task: SyntheticTask) -> Self {
        let (upper, lower) = match task {
            SyntheticTask::Expression { .. } => (0.50, 0.15),
            SyntheticTask::Gender | SyntheticTask::Age => (0.15, 0.50),
        };
        Self {
            size: 16,
            upper_strength: upper,
            lower_strength: lower,
            pixel_noise_scale: 0.4,
            label_noise_scale: 0.5,
        }
    }
}

pub fn generate_synthetic(
    task: SyntheticTask,
    n: usize,
    noise: f64,
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    generate_with(task, &SyntheticConfig::for_task(task), n, noise, seed)
}

pub fn generate_with(
    task: SyntheticTask,
    cfg: &SyntheticConfig,
    n: usize,
    noise: f64,
    seed: u64,
) -> Result<DatasetSplit, DataError> {
    if !(0.0..1.0).contains(&noise) {
        return Err(DataError::InvalidNoise(noise));
    }
    if cfg.size < 4 || cfg.size % 2 != 0 {
        return Err(DataError::OddHeight(cfg.size));
    }
    let classes = match task.task_kind() {
        TaskKind::Classification { num_classes } => {
            if num_classes < 2 || n < 10 * num_classes {
                return Err(DataError::InvalidN {
                    n,
                    minimum: 10 * num_classes.max(2),
                });
            }
            num_classes
        }
        TaskKind::Regression => {
            if n < 10 {
                return Err(DataError::InvalidN { n, minimum: 10 });
            }
            1
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = cfg.size / 2;
    let width = cfg.size;
    let upper: Vec<Vec<f64>> = (0..classes + 1)
        .map(|_| blob_template(&mut rng, half, width))
        .collect();
    let lower: Vec<Vec<f64>> = (0..classes + 1)
        .map(|_| blob_template(&mut rng, half, width))
        .collect();
    let pixel_noise = Normal::new(0.0, (noise * cfg.pixel_noise_scale).max(1e-300)).expect("std");
    let flip_p = (noise * cfg.label_noise_scale).clamp(0.0, 1.0);

    let mut samples = Vec::with_capacity(n);
    let mut strata = Vec::with_capacity(n);
    for i in 0..n {
        let (image, target, stratum) = match task {
            SyntheticTask::Expression { .. } | SyntheticTask::Gender => {
                let c = i % classes;
                let a = rng.gen_range(0.4..=1.0);
                let shift = rng.gen_range(-1i64..=1);
                let mut px = Vec::with_capacity(cfg.size * width);
                paint(&mut px, &upper[c], cfg.upper_strength * a, shift, half, width);
                paint(&mut px, &lower[c], cfg.lower_strength * a, shift, half, width);
                let label = if rng.gen::<f64>() < flip_p {
                    rng.gen_range(0..classes)
                } else {
                    c
                };
                (px, Target::ClassId(label), c)
            }
            SyntheticTask::Age => {
                let t = rng.gen_range(AGE_MIN..=AGE_MAX);
                let u = (t - 0.5 * (AGE_MIN + AGE_MAX)) / (0.5 * (AGE_MAX - AGE_MIN));
                let nuisance = rng.gen_range(-1.0..=1.0);
                let mut px = Vec::with_capacity(cfg.size * width);
                paint_mix(&mut px, &upper[0], &upper[1], cfg.upper_strength, u, nuisance, half, width);
                paint_mix(&mut px, &lower[0], &lower[1], cfg.lower_strength, u, nuisance, half, width);
                (px, Target::AgeLike(t), 0)
            }
        };
        let pixels = image
            .into_iter()
            .map(|v| {
                let noisy = if noise > 0.0 { v + pixel_noise.sample(&mut rng) } else { v };
                quantize(noisy)
            })
            .collect();
        samples.push(Some(LabeledImage::new(
            GrayImage::new(cfg.size, width, pixels),
            target,
        )));
        strata.push(stratum);
    }

    let mut split = DatasetSplit {
        task: task.task_kind(),
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for s in 0..classes {
        let mut idx: Vec<usize> = (0..n).filter(|&i| strata[i] == s).collect();
        idx.shuffle(&mut rng);
        let m = idx.len();
        let n_train = (m * 3).div_ceil(5);
        let n_val = (m - n_train) / 2;
        for (j, &i) in idx.iter().enumerate() {
            let mut img = samples[i].take().expect("each sample used once");
            if j < n_train {
                split.train.push(img);
            } else if j < n_train + n_val {
                split.validation.push(img);
            } else {
                if let Target::ClassId(_) = img.target {
                    img.target = Target::ClassId(s);
                }
                split.test.push(img);
            }
        }
    }
    split.train.shuffle(&mut rng);
    split.validation.shuffle(&mut rng);
    split.test.shuffle(&mut rng);
    Ok(split)
}

/// Round to the 8-bit grid the PNG export uses.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Sum of three signed Gaussian blobs, scaled to max |value| = 1.
fn blob_template(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    let mut t = vec![0.0; h * w];
    for _ in 0..3 {
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let sigma = rng.gen_range(1.0..2.5);
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        for y in 0..h {
            for x in 0..w {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                t[y * w + x] += sign * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    let peak = t.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    t.iter_mut().for_each(|v| *v /= peak);
    t
}

fn shifted(t: &[f64], y: usize, x: usize, shift: i64, w: usize) -> f64 {
    let sx = x as i64 - shift;
    if sx < 0 || sx >= w as i64 {
        0.0
    } else {
        t[y * w + sx as usize]
    }
}

fn paint(px: &mut Vec<f64>, t: &[f64], strength: f64, shift: i64, h: usize, w: usize) {
    for y in 0..h {
        for x in 0..w {
            px.push(0.5 + strength * shifted(t, y, x, shift, w));
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn paint_mix(
    px: &mut Vec<f64>,
    signal: &[f64],
    nuisance_t: &[f64],
    strength: f64,
    u: f64,
    nuisance: f64,
    h: usize,
    w: usize,
) {
    for i in 0..h * w {
        px.push(0.5 + strength * (u * signal[i] + 0.5 * nuisance * nuisance_t[i]));
    }
}
