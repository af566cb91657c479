//! Offline hard-example mining, run once at the start of every epoch.
//!
//! Each occluded training sample is an anchor `a′` exactly once. For the
//! anchor, the positive is the fully visible sample (teacher embedding)
//! farthest from `E_S(a′)` among a random candidate subset of matching
//! samples; the negative is the occluded sample (student embedding) closest
//! to `E_S(a′)` among a random subset of non-matching samples. Distances are
//! squared Euclidean, and ties go to the lowest sample index.
//!
//! "Matching" is same class for classification. For regression, a sample is
//! a positive candidate when its target is within `regression_pos_threshold`
//! of the anchor's (strictly), and a negative candidate otherwise.
//!
//! Candidate subsets are drawn once per epoch per pool: one positive and one
//! negative subset per class, or one of each over the whole training set for
//! regression (filtered per anchor). Subset size is
//! `max(1, round(fraction · pool size))`, so a fraction of 1.0 searches the
//! whole pool. If a regression anchor has no eligible candidate in the
//! sampled subset, its full eligible pool is searched instead; only a pool
//! that is empty outright is an error.

use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::data::{all_batch, LabeledImage, Occlusion, Target};
use crate::nn::{evaluate, NetworkParams, NetworkSpec, NnError};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MiningError {
    #[error("anchor {anchor}: no positive candidate")]
    NoPositive { anchor: usize },
    #[error("anchor {anchor}: no negative candidate")]
    NoNegative { anchor: usize },
    #[error("invalid mining config: {0}")]
    InvalidConfig(String),
    #[error("embedding/target count mismatch: {0}")]
    Mismatch(String),
    #[error("triplet dump line {line}: {reason}")]
    Dump { line: usize, reason: String },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiningConfig {
    pub pos_subset_fraction: f64,
    pub neg_subset_fraction: f64,
    #[serde(default = "default_threshold")]
    pub regression_pos_threshold: f64,
    #[serde(default)]
    pub seed: u64,
    /// Draw fresh candidate subsets for every anchor instead of once per
    /// epoch per pool.
    #[serde(default)]
    pub fresh_subset_per_anchor: bool,
}

fn default_threshold() -> f64 {
    5.0
}

impl MiningConfig {
    /// 10% subsets, the expression-recognition setting.
    pub fn expression() -> Self {
        Self {
            pos_subset_fraction: 0.10,
            neg_subset_fraction: 0.10,
            regression_pos_threshold: 5.0,
            seed: 0,
            fresh_subset_per_anchor: false,
        }
    }

    /// 20% subsets, the age/gender setting.
    pub fn age_gender() -> Self {
        Self {
            pos_subset_fraction: 0.20,
            neg_subset_fraction: 0.20,
            ..Self::expression()
        }
    }

    pub fn exhaustive() -> Self {
        Self {
            pos_subset_fraction: 1.0,
            neg_subset_fraction: 1.0,
            ..Self::expression()
        }
    }

    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        for (name, f) in [
            ("pos_subset_fraction", self.pos_subset_fraction),
            ("neg_subset_fraction", self.neg_subset_fraction),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return Err((name, format!("must lie in (0, 1], got {f}")));
            }
        }
        if !(self.regression_pos_threshold > 0.0) || !self.regression_pos_threshold.is_finite() {
            return Err((
                "regression_pos_threshold",
                format!("must be positive, got {}", self.regression_pos_threshold),
            ));
        }
        Ok(())
    }
}

/// `(a′, p, n′)` as indices into the training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub anchor_idx: usize,
    pub positive_idx: usize,
    pub negative_idx: usize,
}

/// Whether `candidate` may serve as a positive for `anchor`.
pub fn is_positive_pair(anchor: &Target, candidate: &Target, threshold: f64) -> bool {
    match (anchor, candidate) {
        (Target::ClassId(a), Target::ClassId(c)) => a == c,
        (Target::AgeLike(a), Target::AgeLike(c)) => (a - c).abs() < threshold,
        _ => false,
    }
}

fn subset_size(fraction: f64, pool: usize) -> usize {
    ((fraction * pool as f64).round() as usize).clamp(1, pool.max(1))
}

/// Sorted random subset of `pool` (itself sorted).
fn draw(pool: &[usize], fraction: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if pool.is_empty() {
        return Vec::new();
    }
    let k = subset_size(fraction, pool.len());
    if k == pool.len() {
        return pool.to_vec();
    }
    let mut picked: Vec<usize> = sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    picked
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mining over precomputed embeddings: row `i` of `student_occluded` is
/// `E_S(x′_i)`, row `i` of `teacher_full` is `E_T(x_i)`.
pub fn mine_from_embeddings(
    student_occluded: &Tensor,
    teacher_full: &Tensor,
    targets: &[Target],
    cfg: &MiningConfig,
    epoch: u64,
) -> Result<Vec<Triplet>, MiningError> {
    cfg.validate()
        .map_err(|(f, m)| MiningError::InvalidConfig(format!("{f}: {m}")))?;
    let n = targets.len();
    if student_occluded.shape().first() != Some(&n) || teacher_full.shape() != student_occluded.shape() {
        return Err(MiningError::Mismatch(format!(
            "{n} targets, student {:?}, teacher {:?}",
            student_occluded.shape(),
            teacher_full.shape()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed ^ epoch.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );
    let threshold = cfg.regression_pos_threshold;
    let classes = match targets.first() {
        Some(Target::ClassId(_)) => {
            let k = targets.iter().filter_map(Target::class_id).max().unwrap_or(0) + 1;
            Some(k)
        }
        _ => None,
    };

    // Pools drawn once per epoch (unless fresh per anchor).
    let everyone: Vec<usize> = (0..n).collect();
    let class_pools: Vec<(Vec<usize>, Vec<usize>)> = match classes {
        Some(k) => (0..k)
            .map(|c| {
                let pos: Vec<usize> = (0..n).filter(|&i| targets[i] == Target::ClassId(c)).collect();
                let neg: Vec<usize> = (0..n).filter(|&i| targets[i] != Target::ClassId(c)).collect();
                (pos, neg)
            })
            .collect(),
        None => Vec::new(),
    };
    let epoch_subsets: Vec<(Vec<usize>, Vec<usize>)> = if cfg.fresh_subset_per_anchor {
        Vec::new()
    } else if classes.is_some() {
        class_pools
            .iter()
            .map(|(pos, neg)| {
                let p = draw(pos, cfg.pos_subset_fraction, &mut rng);
                let q = draw(neg, cfg.neg_subset_fraction, &mut rng);
                (p, q)
            })
            .collect()
    } else {
        let p = draw(&everyone, cfg.pos_subset_fraction, &mut rng);
        let q = draw(&everyone, cfg.neg_subset_fraction, &mut rng);
        vec![(p, q)]
    };

    let mut triplets = Vec::with_capacity(n);
    for a in 0..n {
        let anchor = student_occluded.row(a);
        let (pos_pool, neg_pool): (Vec<usize>, Vec<usize>) = match (classes, targets[a]) {
            (Some(_), Target::ClassId(c)) => {
                if cfg.fresh_subset_per_anchor {
                    let (pos, neg) = &class_pools[c];
                    (
                        draw(pos, cfg.pos_subset_fraction, &mut rng),
                        draw(neg, cfg.neg_subset_fraction, &mut rng),
                    )
                } else {
                    epoch_subsets[c].clone()
                }
            }
            _ => {
                let (p, q) = if cfg.fresh_subset_per_anchor {
                    (
                        draw(&everyone, cfg.pos_subset_fraction, &mut rng),
                        draw(&everyone, cfg.neg_subset_fraction, &mut rng),
                    )
                } else {
                    epoch_subsets[0].clone()
                };
                let is_pos = |j: &usize| is_positive_pair(&targets[a], &targets[*j], threshold);
                let mut pos: Vec<usize> = p.into_iter().filter(is_pos).collect();
                let mut neg: Vec<usize> = q.into_iter().filter(|j| !is_pos(j)).collect();
                if pos.is_empty() {
                    pos = everyone.iter().copied().filter(is_pos).collect();
                }
                if neg.is_empty() {
                    neg = everyone.iter().copied().filter(|j| !is_pos(j)).collect();
                }
                (pos, neg)
            }
        };
        let mut positive: Option<(usize, f64)> = None;
        for &j in &pos_pool {
            let d = sq_dist(anchor, teacher_full.row(j));
            if positive.map_or(true, |(_, best)| d > best) {
                positive = Some((j, d));
            }
        }
        let mut negative: Option<(usize, f64)> = None;
        for &j in &neg_pool {
            let d = sq_dist(anchor, student_occluded.row(j));
            if negative.map_or(true, |(_, best)| d < best) {
                negative = Some((j, d));
            }
        }
        let positive_idx = positive.ok_or(MiningError::NoPositive { anchor: a })?.0;
        let negative_idx = negative.ok_or(MiningError::NoNegative { anchor: a })?.0;
        triplets.push(Triplet {
            anchor_idx: a,
            positive_idx,
            negative_idx,
        });
    }
    Ok(triplets)
}

/// Embed the training set with both frozen networks, then mine.
#[allow(clippy::too_many_arguments)]
pub fn mine_epoch(
    student: &NetworkParams,
    teacher: &NetworkParams,
    spec: &NetworkSpec,
    train: &[LabeledImage],
    occlusion: Occlusion,
    cfg: &MiningConfig,
    epoch: u64,
) -> Result<Vec<Triplet>, MiningError> {
    if train.is_empty() {
        return Err(MiningError::Mismatch("empty training set".into()));
    }
    let occluded = all_batch(train, occlusion).map_err(|e| MiningError::Mismatch(e.to_string()))?;
    let full = all_batch(train, Occlusion::None).map_err(|e| MiningError::Mismatch(e.to_string()))?;
    let e_s = evaluate(student, spec, &occluded, 256)?.embedding;
    let e_t = evaluate(teacher, spec, &full, 256)?.embedding;
    let targets: Vec<Target> = train.iter().map(|img| img.target).collect();
    mine_from_embeddings(&e_s, &e_t, &targets, cfg, epoch)
}

/// One `anchor positive negative` line per triplet.
pub fn format_dump(triplets: &[Triplet]) -> String {
    let mut out = String::with_capacity(triplets.len() * 16);
    for t in triplets {
        let _ = writeln!(out, "{} {} {}", t.anchor_idx, t.positive_idx, t.negative_idx);
    }
    out
}

pub fn parse_dump(text: &str) -> Result<Vec<Triplet>, MiningError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |reason: &str| MiningError::Dump {
            line: i + 1,
            reason: reason.to_string(),
        };
        if fields.len() != 3 {
            return Err(bad("expected 3 indices"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("not an index"));
        out.push(Triplet {
            anchor_idx: parse(fields[0])?,
            positive_idx: parse(fields[1])?,
            negative_idx: parse(fields[2])?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(rows: &[&[f64]]) -> Tensor {
        let d = rows[0].len();
        Tensor::new(vec![rows.len(), d], rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn single_same_class_candidate_is_the_positive() {
        let targets = [Target::ClassId(0), Target::ClassId(1), Target::ClassId(1)];
        let s = emb(&[&[0.0], &[5.0], &[6.0]]);
        let t = emb(&[&[100.0], &[1.0], &[2.0]]);
        let trips = mine_from_embeddings(&s, &t, &targets, &MiningConfig::exhaustive(), 0).unwrap();
        assert_eq!(trips[0].positive_idx, 0);
        assert_eq!(trips[0].negative_idx, 1);
        // The anchor's own unoccluded version is a valid positive.
        assert_eq!(trips[1].positive_idx, 1);
        assert_eq!(trips[1].negative_idx, 0);
        assert_eq!(trips[2].positive_idx, 1);
    }

    #[test]
    fn regression_threshold_splits_pools() {
        let targets = [Target::AgeLike(30.0), Target::AgeLike(27.0), Target::AgeLike(40.0)];
        assert!(is_positive_pair(&targets[0], &targets[1], 5.0));
        assert!(!is_positive_pair(&targets[0], &targets[2], 5.0));
        let s = emb(&[&[0.0], &[1.0], &[2.0]]);
        let t = emb(&[&[0.0], &[9.0], &[1.0]]);
        let trips = mine_from_embeddings(&s, &t, &targets, &MiningConfig::exhaustive(), 0).unwrap();
        // anchor 30: positives {30, 27} → farthest teacher embedding is 27's.
        assert_eq!(trips[0].positive_idx, 1);
        assert_eq!(trips[0].negative_idx, 2);
    }

    #[test]
    fn degenerate_single_class_has_no_negative() {
        let targets = [Target::ClassId(0), Target::ClassId(0)];
        let s = emb(&[&[0.0], &[1.0]]);
        let err = mine_from_embeddings(&s, &s, &targets, &MiningConfig::exhaustive(), 0).unwrap_err();
        assert_eq!(err, MiningError::NoNegative { anchor: 0 });
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let targets = [Target::ClassId(0), Target::ClassId(0), Target::ClassId(1), Target::ClassId(1)];
        let s = emb(&[&[0.0], &[0.0], &[1.0], &[-1.0]]);
        let t = emb(&[&[2.0], &[-2.0], &[0.0], &[0.0]]);
        let trips = mine_from_embeddings(&s, &t, &targets, &MiningConfig::exhaustive(), 0).unwrap();
        assert_eq!(trips[0].positive_idx, 0);
        assert_eq!(trips[0].negative_idx, 2);
    }

    #[test]
    fn subsets_respect_fraction() {
        assert_eq!(subset_size(0.1, 1000), 100);
        assert_eq!(subset_size(0.1, 3), 1);
        assert_eq!(subset_size(1.0, 7), 7);
    }

    #[test]
    fn dump_round_trip() {
        let trips = vec![
            Triplet { anchor_idx: 0, positive_idx: 4, negative_idx: 9 },
            Triplet { anchor_idx: 1, positive_idx: 2, negative_idx: 3 },
        ];
        assert_eq!(parse_dump(&format_dump(&trips)).unwrap(), trips);
        assert!(parse_dump("1 2\n").is_err());
    }
}
