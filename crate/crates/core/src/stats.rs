//! Evaluation metrics and the paired McNemar test.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("empty input")]
    Empty,
    #[error("label {label} >= num_classes {num_classes}")]
    LabelOutOfRange { label: usize, num_classes: usize },
}

fn check_len(a: usize, b: usize) -> Result<(), StatsError> {
    if a != b {
        return Err(StatsError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(StatsError::Empty);
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64, StatsError> {
    check_len(pred.len(), truth.len())?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Mean per-class recall over the classes present in `truth`.
pub fn weighted_accuracy(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<f64, StatsError> {
    check_len(pred.len(), truth.len())?;
    let mut support = vec![0usize; num_classes];
    let mut hits = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        for label in [p, t] {
            if label >= num_classes {
                return Err(StatsError::LabelOutOfRange { label, num_classes });
            }
        }
        support[t] += 1;
        if p == t {
            hits[t] += 1;
        }
    }
    let (sum, present) = support
        .iter()
        .zip(&hits)
        .filter(|(&s, _)| s > 0)
        .fold((0.0, 0usize), |(acc, k), (&s, &h)| (acc + h as f64 / s as f64, k + 1));
    Ok(sum / present as f64)
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64, StatsError> {
    check_len(pred.len(), truth.len())?;
    Ok(pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum::<f64>() / truth.len() as f64)
}

/// Below this many discordant pairs the exact binomial form is used.
pub const EXACT_BELOW: usize = 20;

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum McNemarMethod {
    ChiSquare,
    ExactBinomial,
    /// No discordant pairs; `p = 1`.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    /// A right, B wrong.
    pub b: usize,
    /// A wrong, B right.
    pub c: usize,
    /// Continuity-corrected `(|b − c| − 1)² / (b + c)`; 0 when degenerate.
    pub statistic: f64,
    pub p_value: f64,
    pub method: McNemarMethod,
}

impl McNemarResult {
    pub fn degenerate(&self) -> bool {
        self.method == McNemarMethod::Degenerate
    }

    pub fn significant(&self) -> bool {
        self.p_value < SIGNIFICANCE_LEVEL
    }
}

/// Discordant counts `(b, c)` of two classifiers on the same samples.
pub fn discordant_counts(pred_a: &[usize], pred_b: &[usize], truth: &[usize]) -> Result<(usize, usize), StatsError> {
    check_len(pred_a.len(), truth.len())?;
    check_len(pred_b.len(), truth.len())?;
    let mut b = 0;
    let mut c = 0;
    for ((pa, pb), t) in pred_a.iter().zip(pred_b).zip(truth) {
        match (pa == t, pb == t) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    Ok((b, c))
}

pub fn mcnemar_test(pred_a: &[usize], pred_b: &[usize], truth: &[usize]) -> Result<McNemarResult, StatsError> {
    let (b, c) = discordant_counts(pred_a, pred_b, truth)?;
    Ok(mcnemar_from_counts(b, c))
}

/// Two-sided McNemar test from discordant counts.
pub fn mcnemar_from_counts(b: usize, c: usize) -> McNemarResult {
    let n = b + c;
    if n == 0 {
        return McNemarResult {
            b,
            c,
            statistic: 0.0,
            p_value: 1.0,
            method: McNemarMethod::Degenerate,
        };
    }
    let diff = (b as f64 - c as f64).abs();
    let statistic = (diff - 1.0).powi(2) / n as f64;
    if n < EXACT_BELOW {
        McNemarResult {
            b,
            c,
            statistic,
            p_value: exact_binomial_p(b, c),
            method: McNemarMethod::ExactBinomial,
        }
    } else {
        let chi = ChiSquared::new(1.0).expect("1 dof");
        McNemarResult {
            b,
            c,
            statistic,
            p_value: (1.0 - chi.cdf(statistic)).clamp(0.0, 1.0),
            method: McNemarMethod::ChiSquare,
        }
    }
}

/// `min(1, 2 · P[X ≤ min(b, c)])` with `X ~ Bin(b + c, 1/2)`.
pub fn exact_binomial_p(b: usize, c: usize) -> f64 {
    let n = (b + c) as u64;
    let k = b.min(c) as u64;
    let dist = Binomial::new(0.5, n).expect("valid binomial");
    (2.0 * dist.cdf(k)).min(1.0)
}

/// Metrics of one model on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    /// Sorted by name for stable serialization.
    pub metrics: std::collections::BTreeMap<String, f64>,
    /// Paired comparisons keyed by the other model's name.
    #[serde(default)]
    pub paired: std::collections::BTreeMap<String, McNemarResult>,
}

impl EvalReport {
    pub fn classification(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<Self, StatsError> {
        let mut metrics = std::collections::BTreeMap::new();
        metrics.insert("accuracy".into(), accuracy(pred, truth)?);
        metrics.insert("weighted_accuracy".into(), weighted_accuracy(pred, truth, num_classes)?);
        Ok(Self {
            n_samples: truth.len(),
            metrics,
            paired: Default::default(),
        })
    }

    pub fn regression(pred: &[f64], truth: &[f64]) -> Result<Self, StatsError> {
        let mut metrics = std::collections::BTreeMap::new();
        metrics.insert("mae".into(), mae(pred, truth)?);
        Ok(Self {
            n_samples: truth.len(),
            metrics,
            paired: Default::default(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_basics() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0, 3, 0], &[1, 2, 3, 4]).unwrap(), 0.5);
        assert!(matches!(accuracy(&[1], &[1, 2]), Err(StatsError::LengthMismatch(1, 2))));
        assert!(matches!(accuracy(&[], &[]), Err(StatsError::Empty)));
    }

    #[test]
    fn weighted_accuracy_majority_predictor() {
        let truth: Vec<usize> = (0..100).map(|i| usize::from(i >= 90)).collect();
        let pred = vec![0; 100];
        assert!((accuracy(&pred, &truth).unwrap() - 0.9).abs() < 1e-12);
        assert!((weighted_accuracy(&pred, &truth, 2).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn weighted_accuracy_balanced_equals_accuracy() {
        let truth = [0, 1, 2, 0, 1, 2];
        let pred = [0, 2, 2, 1, 1, 0];
        assert!(
            (weighted_accuracy(&pred, &truth, 3).unwrap() - accuracy(&pred, &truth).unwrap()).abs() < 1e-12
        );
        assert!(weighted_accuracy(&[3], &[0], 3).is_err());
    }

    #[test]
    fn mae_basics() {
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(mae(&[6.0, 25.0], &[1.0, 20.0]).unwrap(), 5.0);
    }

    #[test]
    fn mcnemar_identical_predictions_degenerate() {
        let r = mcnemar_test(&[0, 1, 1], &[0, 1, 1], &[0, 0, 1]).unwrap();
        assert!(r.degenerate());
        assert_eq!(r.p_value, 1.0);
    }

    #[test]
    fn mcnemar_exact_branch() {
        let r = mcnemar_from_counts(15, 0);
        assert_eq!(r.method, McNemarMethod::ExactBinomial);
        assert!((r.p_value - 2.0 * 0.5f64.powi(15)).abs() < 1e-12);
        assert!((r.p_value - 6.1e-5).abs() < 1e-3);
        assert!(r.significant());
    }

    #[test]
    fn mcnemar_chi_square_branch() {
        let r = mcnemar_from_counts(10, 10);
        assert_eq!(r.method, McNemarMethod::ChiSquare);
        assert!((r.statistic - 0.05).abs() < 1e-12);
        assert!((r.p_value - 0.823).abs() < 1e-3);
        assert!(!r.significant());
    }

    #[test]
    fn mcnemar_symmetric() {
        for (b, c) in [(3, 9), (30, 12), (0, 7), (40, 41)] {
            assert_eq!(mcnemar_from_counts(b, c).p_value, mcnemar_from_counts(c, b).p_value);
        }
    }
}
