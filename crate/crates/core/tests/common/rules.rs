//! Metric arithmetic and decision rules against brute-force oracles.

use super::{brute_cascade, brute_verdict, brute_weighted_precision_recall, pairwise_auc, rng};
use pecad::dataset::SliceLabel;
use pecad::metrics::{confusion_from_predictions, patient_metrics, roc_auc, weighted_precision, weighted_recall, PatientConfusion};
use pecad::triage::{cascade_label, patient_verdict};
use rand::Rng;

pub fn weighted(labels: &[u8], preds: &[u8]) -> (f64, f64) {
    let (c, w) = confusion_from_predictions(labels, preds).unwrap();
    (weighted_precision(&c, &w), weighted_recall(&c, &w))
}

fn lattice() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

pub fn worked_example_is_exact() {
    let (p, r) = weighted(&[1, 1, 0, 0, 0], &[1, 0, 1, 0, 0]);
    assert_eq!(p, 0.6);
    assert_eq!(r, 0.6);
}

pub fn weighted_scores_match_brute_force_on_random_vectors() {
    let mut r = rng(100);
    for case in 0..1000 {
        let n = r.random_range(1..60);
        let bias = r.random_range(0.0..1.0);
        let labels: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(bias))).collect();
        let preds: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(0.5))).collect();
        let (p, rc) = weighted(&labels, &preds);
        let (bp, br) = brute_weighted_precision_recall(&labels, &preds);
        assert!((p - bp).abs() <= 1e-12, "case {case}: precision {p} vs {bp}");
        assert!((rc - br).abs() <= 1e-12, "case {case}: recall {rc} vs {br}");
    }
}

pub fn auc_matches_pairwise_oracle_with_ties() {
    let mut r = rng(200);
    for case in 0..200 {
        let n = r.random_range(2..80);
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(0.4))).collect();
        labels[0] = 1;
        labels[1] = 0;
        // coarse grid in half the cases so ties are common
        let levels = if case % 2 == 0 { 5 } else { 1_000_000 };
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
        let got = roc_auc(&scores, &labels).unwrap();
        let want = pairwise_auc(&scores, &labels);
        assert!((got - want).abs() <= 1e-9, "case {case}: {got} vs {want}");
    }
}

pub fn auc_invariant_under_monotone_transforms() {
    let mut r = rng(300);
    for case in 0..50 {
        let n = r.random_range(2..50);
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(r.random_bool(0.5))).collect();
        labels[0] = 1;
        labels[1] = 0;
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..10) as f64 / 10.0).collect();
        let base = roc_auc(&scores, &labels).unwrap();
        let transforms: [fn(f64) -> f64; 3] = [|s| s.exp(), |s| 3.0 * s - 7.0, |s| (s * 4.0).powi(3)];
        for f in transforms {
            let t: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
            assert_eq!(roc_auc(&t, &labels).unwrap(), base, "case {case}");
        }
    }
}

pub fn patient_counts_reproduce_reported_rates() {
    let m = patient_metrics(&PatientConfusion { tp: 9, fn_: 2, tn: 9, fp: 1 });
    assert!((m.sensitivity - 0.818).abs() <= 1e-3);
    assert!((m.specificity - 0.900).abs() <= 1e-3);
    assert_eq!(m.ppv, 0.9);
    // standard definition tn/(tn+fn), not the value printed alongside the counts
    assert_eq!(m.npv, 9.0 / 11.0);
}

pub fn cascade_matches_brute_force_on_the_lattice() {
    let mut checked = 0;
    for &thr in &lattice() {
        for &ens in &lattice() {
            let fps = std::iter::once(None).chain(lattice().into_iter().map(Some));
            for fp in fps {
                assert_eq!(
                    cascade_label(ens, fp, thr).unwrap(),
                    brute_cascade(ens, fp, thr),
                    "ens {ens} fp {fp:?} thr {thr}"
                );
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 11 * 11 * 12);
}

pub fn verdict_matches_brute_force_on_every_label_vector() {
    let mut checked = 0;
    for n in 1..=6usize {
        for bits in 0u32..(1 << n) {
            let labels: Vec<SliceLabel> = (0..n).map(|i| SliceLabel::from_bool(bits >> i & 1 == 1)).collect();
            let v = patient_verdict("p", &labels).unwrap();
            let (verdict, flagged) = brute_verdict(&labels);
            assert_eq!(v.verdict, verdict, "{labels:?}");
            assert_eq!(v.flagged_slices, flagged);
            assert_eq!(v.n_pe_images, flagged.len());
            checked += 1;
        }
    }
    assert_eq!(checked, 126);
    assert!(patient_verdict("p", &[]).is_err());
}
