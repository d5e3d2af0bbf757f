//! Ranking and threshold metrics with the involvement filter.
//!
//! AUROC uses the rank statistic with tied scores counted half, kept in
//! integer arithmetic (doubled ranks) until one final division so it is
//! bit-equal to exhaustive pair enumeration. Average precision treats
//! every distinct score as one threshold, which makes it invariant to
//! the ordering of tied samples. Balanced accuracy averages sensitivity
//! and specificity at a fixed decision threshold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::predict::CorePrediction;

pub const DEFAULT_MIN_INVOLVEMENT: f64 = 40.0;
pub const DEFAULT_DECISION_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricLevel {
    Patch,
    Core,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auroc: f64,
    pub avg_precision: f64,
    pub balanced_accuracy: f64,
    pub level: MetricLevel,
    pub n_positive: usize,
    pub n_negative: usize,
}

fn check_scores(positives: &[f64], negatives: &[f64]) -> Result<()> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "metrics need both classes, got {} positive and {} negative scores",
            positives.len(),
            negatives.len()
        )));
    }
    if positives.iter().chain(negatives).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("metric scores".into()));
    }
    Ok(())
}

/// Probability that a random positive outranks a random negative, ties
/// counted half: the Mann-Whitney statistic over ranks. The numerator
/// is assembled in integers (ranks doubled so tie midpoints stay
/// integral), making the result exactly the pairwise count divided by
/// `2 * P * N`.
pub fn rank_auroc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    check_scores(positives, negatives)?;
    let mut scored: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));

    // Walk tie groups of the ascending list; each member's doubled
    // average rank is lo + hi (1-based inclusive bounds).
    let mut doubled_rank_sum: i64 = 0;
    let mut i = 0usize;
    while i < scored.len() {
        let mut j = i;
        while j + 1 < scored.len() && scored[j + 1].0 == scored[i].0 {
            j += 1;
        }
        let doubled_avg_rank = (i as i64 + 1) + (j as i64 + 1);
        for entry in &scored[i..=j] {
            if entry.1 {
                doubled_rank_sum += doubled_avg_rank;
            }
        }
        i = j + 1;
    }
    let p = positives.len() as i64;
    let n = negatives.len() as i64;
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2 * p * n) as f64)
}

/// Area under the precision-recall curve by summing precision at each
/// recall step, descending over distinct score thresholds (tied scores
/// enter together, so sample order never matters).
pub fn average_precision(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    check_scores(positives, negatives)?;
    let mut scored: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite scores"));

    let total_pos = positives.len() as f64;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0f64;
    let mut ap = 0.0f64;
    let mut i = 0usize;
    while i < scored.len() {
        let mut j = i;
        while j + 1 < scored.len() && scored[j + 1].0 == scored[i].0 {
            j += 1;
        }
        for entry in &scored[i..=j] {
            if entry.1 {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        let recall = tp as f64 / total_pos;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(ap)
}

/// Mean of sensitivity and specificity with "score >= threshold"
/// deciding the positive class.
pub fn balanced_accuracy(positives: &[f64], negatives: &[f64], threshold: f64) -> Result<f64> {
    check_scores(positives, negatives)?;
    if !threshold.is_finite() {
        return Err(Error::NonFinite("decision threshold".into()));
    }
    let sens = positives.iter().filter(|&&s| s >= threshold).count() as f64
        / positives.len() as f64;
    let spec = negatives.iter().filter(|&&s| s < threshold).count() as f64
        / negatives.len() as f64;
    Ok((sens + spec) / 2.0)
}

/// All three metrics over one score split.
pub fn metrics_from_scores(
    positives: &[f64],
    negatives: &[f64],
    threshold: f64,
    level: MetricLevel,
) -> Result<MetricReport> {
    Ok(MetricReport {
        auroc: rank_auroc(positives, negatives)?,
        avg_precision: average_precision(positives, negatives)?,
        balanced_accuracy: balanced_accuracy(positives, negatives, threshold)?,
        level,
        n_positive: positives.len(),
        n_negative: negatives.len(),
    })
}

/// Keep benign cores and cancer cores at or above the involvement
/// cutoff; low-involvement cancer cores are dropped from evaluation.
pub fn involvement_filter(
    preds: &[CorePrediction],
    min_involvement: f64,
) -> Vec<&CorePrediction> {
    preds
        .iter()
        .filter(|p| p.true_label == 0 || p.involvement_percent >= min_involvement)
        .collect()
}

/// Core-level metrics on the mean-of-classes core probability.
pub fn compute_core_metrics(
    preds: &[CorePrediction],
    min_involvement: f64,
    threshold: f64,
) -> Result<MetricReport> {
    let kept = involvement_filter(preds, min_involvement);
    let positives: Vec<f64> = kept
        .iter()
        .filter(|p| p.true_label == 1)
        .map(|p| p.core_probability)
        .collect();
    let negatives: Vec<f64> = kept
        .iter()
        .filter(|p| p.true_label == 0)
        .map(|p| p.core_probability)
        .collect();
    metrics_from_scores(&positives, &negatives, threshold, MetricLevel::Core)
}

/// Patch-level metrics pooled over patches of cores that pass the
/// involvement filter, each patch carrying its core's weak label.
pub fn compute_patch_metrics(
    preds: &[CorePrediction],
    min_involvement: f64,
    threshold: f64,
) -> Result<MetricReport> {
    let kept = involvement_filter(preds, min_involvement);
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for pred in kept {
        let bucket = if pred.true_label == 1 {
            &mut positives
        } else {
            &mut negatives
        };
        bucket.extend_from_slice(&pred.patch_probabilities);
    }
    metrics_from_scores(&positives, &negatives, threshold, MetricLevel::Patch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    /// O(P*N) oracle with the same half-credit tie rule, assembled the
    /// same integer-then-divide way so equality can be exact.
    fn pairwise_auroc(positives: &[f64], negatives: &[f64]) -> f64 {
        let mut doubled = 0i64;
        for &p in positives {
            for &n in negatives {
                if p > n {
                    doubled += 2;
                } else if p == n {
                    doubled += 1;
                }
            }
        }
        doubled as f64 / (2 * positives.len() as i64 * negatives.len() as i64) as f64
    }

    #[test]
    fn auroc_matches_pairwise_oracle_exactly() {
        let mut rand = rng::substream(71, "metric-auroc");
        for trial in 0..100 {
            let np = 1 + rand.gen_range(0..40);
            let nn = 1 + rand.gen_range(0..40);
            // Quantized scores force plenty of ties.
            let mut draw = |count: usize| -> Vec<f64> {
                (0..count)
                    .map(|_| (rand.gen_range(0..8) as f64) / 7.0)
                    .collect()
            };
            let pos = draw(np);
            let neg = draw(nn);
            let fast = rank_auroc(&pos, &neg).unwrap();
            let slow = pairwise_auroc(&pos, &neg);
            assert_eq!(fast.to_bits(), slow.to_bits(), "trial {trial}");
        }
    }

    #[test]
    fn known_values() {
        // Perfect ranking.
        let pos = [0.9, 0.8];
        let neg = [0.2, 0.1];
        assert_eq!(rank_auroc(&pos, &neg).unwrap(), 1.0);
        assert_eq!(average_precision(&pos, &neg).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&pos, &neg, 0.5).unwrap(), 1.0);

        // Three of four pairs ordered correctly.
        let pos = [0.9, 0.4];
        let neg = [0.6, 0.1];
        assert_eq!(rank_auroc(&pos, &neg).unwrap(), 0.75);
        // At threshold 0.5 one positive and one negative sit on the
        // wrong side each: (0.5 + 0.5) / 2.
        assert_eq!(balanced_accuracy(&pos, &neg, 0.5).unwrap(), 0.5);

        // All ties: chance level.
        let pos = [0.5, 0.5];
        let neg = [0.5];
        assert_eq!(rank_auroc(&pos, &neg).unwrap(), 0.5);

        // Reversed ranking.
        let pos = [0.1];
        let neg = [0.9];
        assert_eq!(rank_auroc(&pos, &neg).unwrap(), 0.0);
    }

    #[test]
    fn average_precision_hand_case() {
        // Descending: 0.9 pos, 0.7 neg, 0.6 pos, 0.2 neg.
        // Steps: R 1/2 at P 1/1, then R 1 at P 2/3.
        let pos = [0.9, 0.6];
        let neg = [0.7, 0.2];
        let expected = 0.5 * 1.0 + 0.5 * (2.0 / 3.0);
        assert!((average_precision(&pos, &neg).unwrap() - expected).abs() < 1e-12);

        // Tied group handled atomically: both orders identical.
        let pos = [0.8];
        let neg = [0.8];
        let ap = average_precision(&pos, &neg).unwrap();
        assert!((ap - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(rank_auroc(&[0.5], &[]).is_err());
        assert!(average_precision(&[], &[0.5]).is_err());
        assert!(balanced_accuracy(&[], &[], 0.5).is_err());
    }

    fn pred(core_id: &str, label: u8, involvement: f64, probs: Vec<f64>) -> CorePrediction {
        let classes: Vec<u8> = probs.iter().map(|&p| u8::from(p >= 0.5)).collect();
        let core_probability =
            classes.iter().map(|&c| c as f64).sum::<f64>() / classes.len() as f64;
        CorePrediction {
            core_id: core_id.to_string(),
            patch_probabilities: probs,
            patch_classes: classes,
            core_probability,
            true_label: label,
            involvement_percent: involvement,
        }
    }

    #[test]
    fn involvement_filter_boundaries() {
        let preds = vec![
            pred("b0", 0, 0.0, vec![0.1, 0.2]),
            pred("c-low", 1, 39.9, vec![0.9, 0.8]),
            pred("c-edge", 1, 40.0, vec![0.9, 0.8]),
            pred("c-high", 1, 80.0, vec![0.7, 0.9]),
        ];
        let kept = involvement_filter(&preds, 40.0);
        let ids: Vec<&str> = kept.iter().map(|p| p.core_id.as_str()).collect();
        assert_eq!(ids, ["b0", "c-edge", "c-high"]);

        // Filtering inside compute equals filtering outside.
        let inside = compute_core_metrics(&preds, 40.0, 0.5).unwrap();
        let prefiltered: Vec<CorePrediction> = kept.into_iter().cloned().collect();
        let outside = compute_core_metrics(&prefiltered, 40.0, 0.5).unwrap();
        assert_eq!(inside, outside);
        assert_eq!(inside.n_positive, 2);
        assert_eq!(inside.n_negative, 1);

        let patch = compute_patch_metrics(&preds, 40.0, 0.5).unwrap();
        assert_eq!(patch.n_positive, 4);
        assert_eq!(patch.n_negative, 2);
        assert_eq!(patch.auroc, 1.0);
    }
}
