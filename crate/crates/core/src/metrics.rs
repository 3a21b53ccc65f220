//! AUC and logloss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auc: f64,
    pub logloss: f64,
    pub n_samples: usize,
    pub n_positive: usize,
    pub n_negative: usize,
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Computed from average ranks (Mann–Whitney U).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes (positives {n_pos}, negatives {n_neg})"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of 1-based ranks of positives, tied groups sharing their mean rank.
    // Ranks are half-integers, so this sum is exact for any realistic n.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].total_cmp(&scores[order[i]]).is_eq() {
            j += 1;
        }
        let mean_rank = (i + j + 2) as f64 / 2.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += mean_rank * pos_in_group as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Mean binary cross-entropy with probabilities clamped to `[eps, 1-eps]`.
pub fn logloss(probs: &[f64], labels: &[u8], eps: f64) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::invalid("probabilities and labels differ in length"));
    }
    if probs.is_empty() {
        return Err(Error::UndefinedMetric("logloss of zero samples".into()));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| sample_logloss(p, y, eps))
        .sum();
    Ok(total / probs.len() as f64)
}

pub(crate) fn sample_logloss(p: f64, y: u8, eps: f64) -> f64 {
    let p = p.clamp(eps, 1.0 - eps);
    if y == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

pub fn evaluate(probs: &[f64], labels: &[u8]) -> Result<EvalResult> {
    let n_positive = labels.iter().filter(|&&y| y == 1).count();
    Ok(EvalResult {
        auc: auc(probs, labels)?,
        logloss: logloss(probs, labels, DEFAULT_PROB_EPS)?,
        n_samples: labels.len(),
        n_positive,
        n_negative: labels.len() - n_positive,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_tied_rankings() {
        assert_eq!(auc(&[0.1, 0.9], &[0, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.1], &[0, 1]).unwrap(), 0.0);
        assert_eq!(auc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(auc(&[0.1, 0.2], &[0, 0]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn logloss_examples() {
        let l = logloss(&[0.5], &[1], DEFAULT_PROB_EPS).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let l = logloss(&[1.0], &[1], DEFAULT_PROB_EPS).unwrap();
        assert!((l - 1e-7).abs() < 1e-12);
        let l = logloss(&[0.0], &[1], DEFAULT_PROB_EPS).unwrap();
        assert!(l.is_finite());
    }

    #[test]
    fn eval_counts_classes() {
        let r = evaluate(&[0.2, 0.7, 0.4], &[0, 1, 1]).unwrap();
        assert_eq!((r.n_positive, r.n_negative, r.n_samples), (2, 1, 3));
        assert_eq!(r.auc, 1.0);
    }
}

#[cfg(test)]
mod props {
    use proptest::prelude::*;

    use super::*;

    fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        (2usize..200).prop_flat_map(|n| {
            (prop::collection::vec((0u8..6).prop_map(|x| x as f64 * 0.25), n), prop::collection::vec(0u8..2, n))
                .prop_filter("both classes", |(_, y)| y.contains(&0) && y.contains(&1))
        })
    }

    proptest! {
        #[test]
        fn auc_in_unit_interval_and_antisymmetric((s, y) in instance()) {
            let a = auc(&s, &y).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            let neg: Vec<f64> = s.iter().map(|x| -x).collect();
            prop_assert!((auc(&neg, &y).unwrap() - (1.0 - a)).abs() < 1e-12);
        }

        #[test]
        fn auc_ignores_monotone_transforms((s, y) in instance()) {
            let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() + 1.0).collect();
            prop_assert_eq!(auc(&s, &y).unwrap(), auc(&t, &y).unwrap());
        }

        #[test]
        fn logloss_is_nonnegative(p in prop::collection::vec(0.0..=1.0f64, 1..50), seed in 0u8..2) {
            let y: Vec<u8> = p.iter().enumerate().map(|(i, _)| (i as u8 + seed) % 2).collect();
            let l = logloss(&p, &y, DEFAULT_PROB_EPS).unwrap();
            prop_assert!(l >= 0.0 && l <= -(DEFAULT_PROB_EPS.ln()) + 1e-12);
        }
    }
}
