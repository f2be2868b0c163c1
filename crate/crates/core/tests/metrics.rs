mod common;

use common::rules::weighted;
use pecad::metrics::{
    confusion_from_predictions, iou, mean_iou, patient_metrics, roc_auc, PatientConfusion,
};
use proptest::prelude::*;

#[test]
fn auc_rejects_single_class() {
    assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
    assert!(roc_auc(&[0.1, f64::NAN], &[1, 0]).is_err());
}

fn labels_and_preds() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
    (1usize..40).prop_flat_map(|n| (prop::collection::vec(0u8..2, n), prop::collection::vec(0u8..2, n)))
}

fn scored_labels() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    (2usize..40).prop_flat_map(|n| (prop::collection::vec(0.0f64..1.0, n), prop::collection::vec(0u8..2, n)))
        .prop_map(|(s, mut l)| {
            l[0] = 1;
            l[1] = 0;
            (s, l)
        })
}

proptest! {
    #[test]
    fn class_weights_sum_to_one((labels, preds) in labels_and_preds()) {
        let (c, w) = confusion_from_predictions(&labels, &preds).unwrap();
        prop_assert!((w.w0 + w.w1 - 1.0).abs() < 1e-12);
        prop_assert_eq!(c.fp1, c.fn0);
        prop_assert_eq!(c.fn1, c.fp0);
        prop_assert_eq!(c.total(), labels.len() as u64);
    }

    #[test]
    fn weighted_scores_lie_in_unit_interval((labels, preds) in labels_and_preds()) {
        let (p, r) = weighted(&labels, &preds);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&p));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&r));
    }

    #[test]
    fn perfect_predictions_score_one(labels in prop::collection::vec(0u8..2, 1..40)) {
        let (p, r) = weighted(&labels, &labels);
        prop_assert!((p - 1.0).abs() < 1e-12);
        prop_assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_in_unit_interval_and_complements((scores, labels) in scored_labels()) {
        let a = roc_auc(&scores, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        let b = roc_auc(&scores, &flipped).unwrap();
        prop_assert!((a + b - 1.0).abs() < 1e-12);
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((roc_auc(&negated, &labels).unwrap() - b).abs() < 1e-12);
    }

    #[test]
    fn iou_is_symmetric_and_bounded(
        (a, b) in (1usize..64).prop_flat_map(|n| (prop::collection::vec(0u8..2, n), prop::collection::vec(0u8..2, n)))
    ) {
        let x = iou(&a, &b).unwrap();
        prop_assert_eq!(x, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&x));
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let m = mean_iou(&[a.clone(), b.clone()], &[b.clone(), a.clone()]).unwrap();
        prop_assert!((m - x).abs() < 1e-12);
    }

    #[test]
    fn patient_rates_bounded(tp in 0u64..20, fp in 0u64..20, tn in 0u64..20, fn_ in 0u64..20) {
        let m = patient_metrics(&PatientConfusion { tp, fp, tn, fn_ });
        for v in [m.sensitivity, m.specificity, m.ppv, m.npv] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn worked_example_is_exact() {
    common::rules::worked_example_is_exact();
}

#[test]
fn weighted_scores_match_brute_force_on_random_vectors() {
    common::rules::weighted_scores_match_brute_force_on_random_vectors();
}

#[test]
fn auc_matches_pairwise_oracle_with_ties() {
    common::rules::auc_matches_pairwise_oracle_with_ties();
}

#[test]
fn auc_invariant_under_monotone_transforms() {
    common::rules::auc_invariant_under_monotone_transforms();
}

#[test]
fn patient_counts_reproduce_reported_rates() {
    common::rules::patient_counts_reproduce_reported_rates();
}
