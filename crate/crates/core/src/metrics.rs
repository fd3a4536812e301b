//! Evaluation metrics: ranking quality of malignancy scores and
//! precision/recall of binary zoom decisions.

use crate::error::{Error, Result};

/// Area under the ROC curve via tie-averaged ranks, equal to the
/// Mann-Whitney statistic: the probability that a random positive outscores
/// a random negative, counting ties as half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Usage(format!(
            "roc_auc got {} scores and {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Usage("roc_auc labels must be 0 or 1".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::DegenerateInput(
            "roc_auc scores must be finite".into(),
        ));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateInput(format!(
            "roc_auc needs both classes, got {pos} positives and {neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Tie groups share the average of the 1-based ranks they span.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let p = pos as f64;
    let n = neg as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Precision and recall of binary zoom decisions against their targets.
/// An empty denominator (no predicted positives, or no true positives)
/// yields 1.0 for the affected metric.
pub fn zoom_pr(predicted: &[u8], targets: &[u8]) -> Result<(f64, f64)> {
    if predicted.len() != targets.len() {
        return Err(Error::Usage(format!(
            "zoom_pr got {} predictions and {} targets",
            predicted.len(),
            targets.len()
        )));
    }
    if predicted.iter().chain(targets).any(|&v| v > 1) {
        return Err(Error::Usage("zoom_pr values must be 0 or 1".into()));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fne = 0usize;
    for (&p, &t) in predicted.iter().zip(targets) {
        match (p, t) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fne += 1,
            _ => {}
        }
    }
    let precision = if tp + fp == 0 {
        1.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fne == 0 {
        1.0
    } else {
        tp as f64 / (tp + fne) as f64
    };
    Ok((precision, recall))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    /// Direct pairwise Mann-Whitney statistic, quadratic in set size.
    pub(crate) fn auc_pairwise_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, (&sp, &lp)) in scores.iter().zip(labels).enumerate() {
            if lp != 1 {
                continue;
            }
            for (j, (&sn, &ln)) in scores.iter().zip(labels).enumerate() {
                if i == j || ln != 0 {
                    continue;
                }
                pairs += 1.0;
                if sp > sn {
                    wins += 1.0;
                } else if sp == sn {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn frozen_auc_example() {
        let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
        assert!((auc - 0.75).abs() <= 1e-15);
    }

    #[test]
    fn perfect_separation_and_total_ties() {
        let auc = roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap();
        assert_eq!(auc, 1.0);
        let rev = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(rev, 0.0);
        let tied = roc_auc(&[0.5; 6], &[0, 1, 0, 1, 0, 1]).unwrap();
        assert_eq!(tied, 0.5);
    }

    #[test]
    fn single_class_inputs_are_degenerate() {
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1, 1]),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[0, 0]),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(roc_auc(&[0.1], &[0, 1]), Err(Error::Usage(_))));
    }

    #[test]
    fn matches_pairwise_oracle_on_random_sets_with_ties() {
        let mut rng = ChaCha20Rng::seed_from_u64(71);
        for _ in 0..50 {
            let n = rng.gen_range(2..120);
            // Coarse quantization forces plenty of ties.
            let scores: Vec<f64> = (0..n)
                .map(|_| f64::from(rng.gen_range(0..10)) / 10.0)
                .collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..=1)).collect();
            labels[0] = 0;
            if n > 1 {
                labels[1] = 1;
            }
            let fast = roc_auc(&scores, &labels).unwrap();
            let slow = auc_pairwise_oracle(&scores, &labels);
            assert!(
                (fast - slow).abs() <= 1e-12,
                "sorted {fast} vs pairwise {slow}"
            );
        }
    }

    #[test]
    fn invariant_under_monotone_transform() {
        let mut rng = ChaCha20Rng::seed_from_u64(72);
        let scores: Vec<f64> = (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut labels: Vec<u8> = (0..40).map(|_| rng.gen_range(0..=1)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let base = roc_auc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores
            .iter()
            .map(|&s| 1.0 / (1.0 + (-3.0 * s).exp()))
            .collect();
        let after = roc_auc(&squashed, &labels).unwrap();
        assert!((base - after).abs() <= 1e-12);
    }

    #[test]
    fn negating_scores_complements_auc_without_ties() {
        let mut rng = ChaCha20Rng::seed_from_u64(73);
        // Distinct scores by construction.
        let scores: Vec<f64> = (0..30)
            .map(|i| i as f64 + rng.gen_range(0.0..0.5))
            .collect();
        let mut labels: Vec<u8> = (0..30).map(|_| rng.gen_range(0..=1)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let a = roc_auc(&scores, &labels).unwrap();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let b = roc_auc(&neg, &labels).unwrap();
        assert!((a + b - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn zoom_pr_frozen_examples() {
        assert_eq!(zoom_pr(&[1, 0, 1], &[1, 0, 1]).unwrap(), (1.0, 1.0));
        // No positives predicted while positives exist.
        assert_eq!(zoom_pr(&[0, 0, 0], &[1, 0, 1]).unwrap(), (1.0, 0.0));
        // TP=3, FP=1, FN=1.
        let (p, r) = zoom_pr(&[1, 1, 1, 1, 0], &[1, 1, 1, 0, 1]).unwrap();
        assert_eq!((p, r), (0.75, 0.75));
        // No true positives at all: recall follows the empty convention.
        assert_eq!(zoom_pr(&[0, 0], &[0, 0]).unwrap(), (1.0, 1.0));
    }

    #[test]
    fn zoom_pr_rejects_bad_inputs() {
        assert!(matches!(zoom_pr(&[1], &[1, 0]), Err(Error::Usage(_))));
        assert!(matches!(zoom_pr(&[2], &[1]), Err(Error::Usage(_))));
    }
}
