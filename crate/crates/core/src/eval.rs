//! Classification metrics, ROC-AUC, stratified folds and weighted-vote fusion.

use serde::{Deserialize, Serialize};

use crate::decomposition::View;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::volume::{Label, Metric};

/// Fused or branch probabilities at or above this are called SZ.
pub const DECISION_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchPrediction {
    pub subject_id: String,
    pub metric: Metric,
    pub view: View,
    pub p_positive: f64,
}

/// Weighted mean of branch probabilities and the thresholded label.
pub fn fuse(preds: &[f64], weights: &[f64]) -> Result<(f64, Label)> {
    if preds.len() != weights.len() || preds.is_empty() {
        return Err(Error::invalid(format!(
            "fuse needs matching non-empty inputs, got {} predictions and {} weights",
            preds.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::invalid("fusion weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Err(Error::invalid("fusion weights are all zero"));
    }
    let p = preds.iter().zip(weights).map(|(p, w)| p * w).sum::<f64>() / total;
    Ok((p, Label::from_positive(p >= DECISION_THRESHOLD)))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionScheme {
    Uniform,
    /// Each branch weighted by its accuracy on an inner holdout split of the training fold.
    #[default]
    HoldoutAccuracy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fn_ + self.tn + self.fp
    }
}

/// Accuracy, sensitivity, specificity and ROC-AUC. Sensitivity, specificity
/// and AUC are `None` when the evaluated set lacks a class.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub roc_auc: Option<f64>,
    pub confusion: Confusion,
}

pub fn confusion(p_positive: &[f64], labels: &[Label]) -> Confusion {
    let mut c = Confusion::default();
    for (&p, &l) in p_positive.iter().zip(labels) {
        match (p >= DECISION_THRESHOLD, l.is_positive()) {
            (true, true) => c.tp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
        }
    }
    c
}

pub fn compute_metrics(p_positive: &[f64], labels: &[Label]) -> Result<Metrics> {
    if p_positive.len() != labels.len() || labels.is_empty() {
        return Err(Error::invalid("metrics need equally many predictions and labels, at least one"));
    }
    let c = confusion(p_positive, labels);
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    Ok(Metrics {
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        roc_auc: roc_auc(p_positive, labels).ok(),
        confusion: c,
    })
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Sort-based; exact in the pair counts.
pub fn roc_auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let n_pos = labels.iter().filter(|l| l.is_positive()).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("ROC-AUC needs both classes"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the credit, so every term stays an integer.
    let mut twice_credit: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]].is_positive() {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_credit += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(twice_credit as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Stratified fold assignment. Each class's members (in input order) are
/// shuffled with a SplitMix64 stream on `seed`, positives first, then dealt
/// round-robin; the negatives continue the deal where the positives stopped,
/// so overall fold sizes also differ by at most one.
pub fn make_folds(labels: &[Label], n_folds: usize, seed: u64) -> Result<Vec<usize>> {
    if n_folds < 2 {
        return Err(Error::invalid("need at least two folds"));
    }
    if labels.len() < n_folds {
        return Err(Error::invalid(format!("{} subjects cannot fill {n_folds} folds", labels.len())));
    }
    let mut rng = SplitMix64::new(seed);
    let mut assignment = vec![0; labels.len()];
    let mut next = 0;
    for class in [Label::Sz, Label::Hc] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        rng.shuffle(&mut members);
        for i in members {
            assignment[i] = next;
            next = (next + 1) % n_folds;
        }
    }
    Ok(assignment)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    /// Number of cells the statistic was defined in.
    pub n: usize,
}

/// Mean and sample standard deviation of the defined values.
pub fn summarize<I: IntoIterator<Item = Option<f64>>>(values: I) -> Option<Summary> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len();
    let mean = v.iter().sum::<f64>() / n as f64;
    let std = if n > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    Some(Summary { mean, std, n })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    use Label::{Hc, Sz};

    fn roc_pairwise(scores: &[f64], labels: &[Label]) -> f64 {
        let (mut credit, mut pairs) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == Sz && labels[j] == Hc {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        credit += 1.0;
                    } else if scores[i] == scores[j] {
                        credit += 0.5;
                    }
                }
            }
        }
        credit / pairs
    }

    #[test]
    fn uniform_fusion_is_mean() {
        let p = [0.8, 0.4, 0.9, 0.7, 0.6, 0.8, 0.5, 0.9, 0.7];
        let (f, l) = fuse(&p, &[1.0; 9]).unwrap();
        assert!((f - 0.7).abs() < 1e-12);
        assert_eq!(l, Sz);
    }

    #[test]
    fn projection_and_weighted_mean() {
        let p = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
        let mut w = [0.0; 9];
        w[2] = 1.0;
        assert_eq!(fuse(&p, &w).unwrap(), (0.3, Hc));
        let (f, l) = fuse(&[0.9, 0.3], &[2.0, 1.0]).unwrap();
        assert!((f - 0.7).abs() < 1e-12);
        assert_eq!(l, Sz);
        assert!(fuse(&p, &[0.0; 9]).is_err());
    }

    #[test]
    fn chance_weights_reduce_to_uniform() {
        let p = [0.2, 0.9, 0.4, 0.6, 0.55, 0.3, 0.8, 0.1, 0.7];
        let a = fuse(&p, &[0.5; 9]).unwrap();
        let b = fuse(&p, &[1.0; 9]).unwrap();
        assert!((a.0 - b.0).abs() < 1e-12);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn hand_confusion() {
        // TP=3, FN=1, TN=2, FP=2.
        let p = [0.9, 0.8, 0.7, 0.1, 0.2, 0.3, 0.6, 0.5];
        let l = [Sz, Sz, Sz, Sz, Hc, Hc, Hc, Hc];
        let m = compute_metrics(&p, &l).unwrap();
        assert_eq!(m.confusion, Confusion { tp: 3, fn_: 1, tn: 2, fp: 2 });
        assert_eq!(m.accuracy, 0.625);
        assert_eq!(m.sensitivity, Some(0.75));
        assert_eq!(m.specificity, Some(0.5));
    }

    #[test]
    fn perfect_and_constant_classifiers() {
        let l = [Sz, Sz, Hc, Hc];
        let m = compute_metrics(&[0.9, 0.6, 0.1, 0.4], &l).unwrap();
        assert_eq!((m.accuracy, m.sensitivity, m.specificity), (1.0, Some(1.0), Some(1.0)));
        let m = compute_metrics(&[0.9; 4], &l).unwrap();
        assert_eq!((m.accuracy, m.sensitivity, m.specificity), (0.5, Some(1.0), Some(0.0)));
    }

    #[test]
    fn single_class_marks_undefined() {
        let m = compute_metrics(&[0.9, 0.2], &[Sz, Sz]).unwrap();
        assert_eq!(m.specificity, None);
        assert_eq!(m.sensitivity, Some(0.5));
        assert_eq!(m.roc_auc, None);
        assert!(roc_auc(&[0.1, 0.2], &[Hc, Hc]).is_err());
    }

    #[test]
    fn roc_fixed_cases() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.1], &[Sz, Sz, Hc, Hc]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.4; 6], &[Sz, Hc, Sz, Hc, Hc, Sz]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.8, 0.9], &[Sz, Sz, Hc, Hc]).unwrap(), 0.0);
    }

    #[test]
    fn fold_sizes() {
        let l10: Vec<Label> = (0..10).map(|i| Label::from_positive(i % 2 == 0)).collect();
        let f = make_folds(&l10, 5, 1).unwrap();
        for k in 0..5 {
            assert_eq!(f.iter().filter(|&&x| x == k).count(), 2);
        }
        let l11: Vec<Label> = (0..11).map(|i| Label::from_positive(i < 6)).collect();
        let f = make_folds(&l11, 5, 1).unwrap();
        let mut sizes: Vec<usize> = (0..5).map(|k| f.iter().filter(|&&x| x == k).count()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
        assert_eq!(make_folds(&l11, 5, 1).unwrap(), f);
        assert!(make_folds(&l10[..3], 5, 1).is_err());
    }

    #[test]
    fn summary_stats() {
        let s = summarize([Some(1.0), None, Some(3.0)]).unwrap();
        assert_eq!((s.mean, s.n), (2.0, 2));
        assert!((s.std - 2f64.sqrt()).abs() < 1e-12);
        assert!(summarize([None]).is_none());
    }

    fn labels_with_both(n: usize) -> impl Strategy<Value = Vec<Label>> {
        prop::collection::vec(any::<bool>(), n).prop_map(|v| {
            let mut l: Vec<Label> = v.into_iter().map(Label::from_positive).collect();
            l[0] = Sz;
            l[1] = Hc;
            l
        })
    }

    proptest! {
        #[test]
        fn roc_matches_pairwise(
            (scores, labels) in (2usize..40).prop_flat_map(|n| (
                prop::collection::vec((0u8..6).prop_map(|v| v as f64 / 5.0), n),
                labels_with_both(n),
            ))
        ) {
            let fast = roc_auc(&scores, &labels).unwrap();
            prop_assert!((fast - roc_pairwise(&scores, &labels)).abs() <= 1e-12);
        }

        #[test]
        fn roc_invariant_under_monotone_transform(
            (scores, labels) in (2usize..30).prop_flat_map(|n| (
                prop::collection::vec(-3.0f64..3.0, n),
                labels_with_both(n),
            ))
        ) {
            let warped: Vec<f64> = scores.iter().map(|s| s.exp() * 2.0 + 1.0).collect();
            prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), roc_auc(&warped, &labels).unwrap());
        }

        #[test]
        fn fuse_scale_invariant(
            p in prop::collection::vec(0.0f64..1.0, 9),
            w in prop::collection::vec(0.01f64..1.0, 9),
            scale in 0.1f64..100.0,
        ) {
            let scaled: Vec<f64> = w.iter().map(|x| x * scale).collect();
            let (a, la) = fuse(&p, &w).unwrap();
            let (b, lb) = fuse(&p, &scaled).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            if (a - DECISION_THRESHOLD).abs() > 1e-9 {
                prop_assert_eq!(la, lb);
            }
        }

        #[test]
        fn folds_partition_and_stratify(labels in prop::collection::vec(any::<bool>(), 5..60), seed in any::<u64>()) {
            let labels: Vec<Label> = labels.into_iter().map(Label::from_positive).collect();
            let f = make_folds(&labels, 5, seed).unwrap();
            prop_assert_eq!(f.len(), labels.len());
            let sizes: Vec<usize> = (0..5).map(|k| f.iter().filter(|&&x| x == k).count()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for class in [Sz, Hc] {
                let per: Vec<usize> = (0..5)
                    .map(|k| f.iter().zip(&labels).filter(|(&x, &l)| x == k && l == class).count())
                    .collect();
                prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
            }
        }
    }
}
