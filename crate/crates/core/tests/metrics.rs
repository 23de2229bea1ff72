//! Metrics against brute-force definitions.

use ntkt_core::eval::{auc, score_metrics, Confusion, PAIRWISE_LIMIT};
use ntkt_core::Error;
use proptest::prelude::*;

const EPS: f64 = 1e-12;

/// Fraction of (positive, negative) pairs ranked correctly, ties worth one half.
fn brute_auc(s: &[(f64, bool)]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for a in s.iter().filter(|x| x.1) {
        for b in s.iter().filter(|x| !x.1) {
            den += 1.0;
            num += if a.0 > b.0 { 1.0 } else if a.0 == b.0 { 0.5 } else { 0.0 };
        }
    }
    (den > 0.0).then(|| num / den)
}

fn brute_counts(s: &[(f64, bool)], t: f64) -> (f64, f64, f64, f64) {
    let count = |pred: bool, y: bool| s.iter().filter(|(p, l)| (*p >= t) == pred && *l == y).count() as f64;
    (count(true, true), count(true, false), count(false, false), count(false, true))
}

/// Scores drawn from a coarse grid so that ties are common.
fn scores() -> impl Strategy<Value = Vec<(f64, bool)>> {
    prop::collection::vec(((0u32..=20).prop_map(|k| k as f64 / 20.0), any::<bool>()), 1..=200)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn metrics_match_brute_force(s in scores(), t in prop::sample::select(vec![0.3, 0.5, 0.7])) {
        let r = score_metrics(&s, t).unwrap();
        let (tp, fp, tn, fn_) = brute_counts(&s, t);
        prop_assert_eq!(r.n, s.len());
        prop_assert!((r.accuracy - (tp + tn) / s.len() as f64).abs() < EPS);
        let f1 = (2.0 * tp + fp + fn_ > 0.0).then(|| 2.0 * tp / (2.0 * tp + fp + fn_));
        match (r.f1, f1) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < EPS),
            (a, b) => prop_assert_eq!(a, b),
        }
        match (r.auc, brute_auc(&s)) {
            (Some(a), Some(b)) => prop_assert!((a - b).abs() < EPS),
            (a, b) => prop_assert_eq!(a, b),
        }
    }

    #[test]
    fn constant_predictor_has_auc_one_half(c in 0.0f64..=1.0, labels in prop::collection::vec(any::<bool>(), 2..200)) {
        prop_assume!(labels.iter().any(|&y| y) && labels.iter().any(|&y| !y));
        let s: Vec<_> = labels.iter().map(|&y| (c, y)).collect();
        prop_assert_eq!(auc(&s).unwrap(), 0.5);
    }

    #[test]
    fn perfect_predictor_scores_one(labels in prop::collection::vec(any::<bool>(), 2..200)) {
        prop_assume!(labels.iter().any(|&y| y) && labels.iter().any(|&y| !y));
        let s: Vec<_> = labels.iter().map(|&y| (if y { 1.0 } else { 0.0 }, y)).collect();
        let r = score_metrics(&s, 0.5).unwrap();
        prop_assert_eq!(r.accuracy, 1.0);
        prop_assert_eq!(r.f1, Some(1.0));
        prop_assert_eq!(r.auc, Some(1.0));
    }
}

#[test]
fn rank_path_matches_pair_counting() {
    let n = PAIRWISE_LIMIT + 1_500;
    let big: Vec<(f64, bool)> = (0..n).map(|i| (((i * 7919) % 97) as f64 / 97.0, (i * 31) % 7 < 4)).collect();
    let exact = brute_auc(&big).unwrap();
    assert!((auc(&big).unwrap() - exact).abs() < 1e-9);
}

#[test]
fn single_class_is_undefined() {
    assert!(matches!(auc(&[(0.2, true), (0.9, true)]), Err(Error::Undefined(_))));
    let r = score_metrics(&[(0.2, false), (0.3, false)], 0.5).unwrap();
    assert_eq!((r.auc, r.f1, r.accuracy), (None, None, 1.0));
}

#[test]
fn threshold_is_inclusive() {
    let c = Confusion::from_scores([(0.5, true), (0.5, false), (0.49, true)], 0.5);
    assert_eq!((c.tp, c.fp, c.tn, c.fn_), (1, 1, 0, 1));
}
