//! AUROC and micro-averaged F1.

use crate::error::{Error, Result};

/// Rank-based AUROC (Mann-Whitney U with midranks for ties).
///
/// Equals `(concordant + ties / 2) / (P * N)` over all positive/negative
/// pairs. Fails when either class is missing.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both positive and negative labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // sum of (twice the) midranks of positives, kept integral
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1, midrank*2 = i+j+2
        let mid2 = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        rank_sum2 += mid2 * pos_in_group;
        i = j + 1;
    }
    let p = n_pos as u128;
    // 2U = 2R - P(P+1)
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Confusion counts summed across classes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MicroCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl MicroCounts {
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }

    /// Counts for single-label multiclass predictions.
    pub fn from_predictions(truth: &[usize], predicted: &[usize], n_classes: usize) -> Self {
        let mut c = MicroCounts::default();
        for class in 0..n_classes {
            for (&t, &p) in truth.iter().zip(predicted) {
                match (t == class, p == class) {
                    (true, true) => c.tp += 1,
                    (false, true) => c.fp += 1,
                    (true, false) => c.fn_ += 1,
                    _ => {}
                }
            }
        }
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn brute(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let (mut p, mut n) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            if li {
                p += 1.0;
            } else {
                n += 1.0;
            }
            if !li {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj {
                    continue;
                }
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        num / (p * n)
    }

    #[test]
    fn perfect_and_tied() {
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.1, 0.9], &[true, false]).unwrap(), 0.0);
        assert!(matches!(auroc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn matches_pairwise_count_with_duplicates() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let scores: Vec<f64> = (0..200).map(|_| (r.random_range(0..25) as f64) / 4.0).collect();
        let labels: Vec<bool> = (0..200).map(|_| r.random_bool(0.3)).collect();
        assert!((auroc(&scores, &labels).unwrap() - brute(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn micro_f1_hand_values() {
        assert!((MicroCounts { tp: 2, fp: 1, fn_: 1 }.f1() - 2.0 / 3.0).abs() < 1e-15);
        let c = MicroCounts::from_predictions(&[0, 0, 1, 2], &[0, 1, 1, 1], 4);
        assert_eq!(c, MicroCounts { tp: 2, fp: 2, fn_: 2 });
    }

    use proptest::prelude::*;
    proptest! {
        #[test]
        fn invariant_under_increasing_transform(xs in proptest::collection::vec((-5i32..5, any::<bool>()), 2..60)) {
            let scores: Vec<f64> = xs.iter().map(|x| x.0 as f64).collect();
            let labels: Vec<bool> = xs.iter().map(|x| x.1).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let transformed: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() + 3.0).collect();
            prop_assert_eq!(auroc(&scores, &labels).unwrap(), auroc(&transformed, &labels).unwrap());
        }
    }
}
