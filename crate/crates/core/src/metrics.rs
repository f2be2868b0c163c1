//! Evaluation arithmetic: class-weighted precision/recall, ROC AUC,
//! per-patient rates and mean IoU.
//!
//! Any ratio with a zero denominator contributes 0, except the IoU of two
//! empty masks, which is 1.

use serde::{Deserialize, Serialize};

use crate::error::{PecadError, Result};

/// Per-class tallies. Class 1 is PE, class 0 is non-PE; each class treats
/// itself as the positive class, so `fp1 == fn0` and `fn1 == fp0`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp1: u64,
    pub fp1: u64,
    pub fn1: u64,
    pub tp0: u64,
    pub fp0: u64,
    pub fn0: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp1 + self.fn1 + self.tp0 + self.fn0
    }
}

/// Image-count ratios of the two classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub w1: f64,
    pub w0: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientConfusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl PatientConfusion {
    /// Tally (truth, verdict) pairs.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (bool, bool)>) -> Self {
        let mut pc = Self::default();
        for (truth, pred) in pairs {
            match (truth, pred) {
                (true, true) => pc.tp += 1,
                (true, false) => pc.fn_ += 1,
                (false, true) => pc.fp += 1,
                (false, false) => pc.tn += 1,
            }
        }
        pc
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientMetrics {
    pub sensitivity: f64,
    pub specificity: f64,
    pub ppv: f64,
    pub npv: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn check_binary(name: &str, v: &[u8]) -> Result<()> {
    match v.iter().find(|&&x| x > 1) {
        Some(x) => Err(PecadError::Invalid(format!("{name} contains non-binary value {x}"))),
        None => Ok(()),
    }
}

pub fn confusion_from_predictions(labels: &[u8], preds: &[u8]) -> Result<(ConfusionCounts, ClassWeights)> {
    if labels.len() != preds.len() {
        return Err(PecadError::Shape(format!(
            "{} labels vs {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    if labels.is_empty() {
        return Err(PecadError::Invalid("no predictions to score".into()));
    }
    check_binary("labels", labels)?;
    check_binary("predictions", preds)?;
    let mut c = ConfusionCounts::default();
    for (&l, &p) in labels.iter().zip(preds) {
        match (l, p) {
            (1, 1) => {
                c.tp1 += 1;
            }
            (0, 0) => {
                c.tp0 += 1;
            }
            // non-PE called PE: false positive for class 1, missed class-0 sample
            (0, 1) => {
                c.fp1 += 1;
                c.fn0 += 1;
            }
            _ => {
                c.fn1 += 1;
                c.fp0 += 1;
            }
        }
    }
    let n = labels.len() as f64;
    let w1 = labels.iter().filter(|&&l| l == 1).count() as f64 / n;
    Ok((c, ClassWeights { w1, w0: 1.0 - w1 }))
}

/// `TP₀/(TP₀+FP₀)·W₀ + TP₁/(TP₁+FP₁)·W₁`.
pub fn weighted_precision(c: &ConfusionCounts, w: &ClassWeights) -> f64 {
    ratio(c.tp0, c.tp0 + c.fp0) * w.w0 + ratio(c.tp1, c.tp1 + c.fp1) * w.w1
}

/// `TP₀/(TP₀+FN₀)·W₀ + TP₁/(TP₁+FN₁)·W₁`.
pub fn weighted_recall(c: &ConfusionCounts, w: &ClassWeights) -> f64 {
    ratio(c.tp0, c.tp0 + c.fn0) * w.w0 + ratio(c.tp1, c.tp1 + c.fn1) * w.w1
}

/// Mann–Whitney AUC via average ranks (ties count one half).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(PecadError::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    check_binary("labels", labels)?;
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(PecadError::NonFinite(format!("score {s}")));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(PecadError::Invalid("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

pub fn patient_metrics(pc: &PatientConfusion) -> PatientMetrics {
    PatientMetrics {
        sensitivity: ratio(pc.tp, pc.tp + pc.fn_),
        specificity: ratio(pc.tn, pc.tn + pc.fp),
        ppv: ratio(pc.tp, pc.tp + pc.fp),
        npv: ratio(pc.tn, pc.tn + pc.fn_),
    }
}

/// IoU of the positive class; two empty masks score 1.
pub fn iou(pred: &[u8], target: &[u8]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(PecadError::Shape(format!(
            "mask sizes {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&p, &t) in pred.iter().zip(target) {
        let (p, t) = (p != 0, t != 0);
        inter += u64::from(p && t);
        union += u64::from(p || t);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

pub fn mean_iou<P: AsRef<[u8]>, T: AsRef<[u8]>>(preds: &[P], targets: &[T]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(PecadError::Shape(format!(
            "{} predicted masks vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Err(PecadError::Invalid("mean IoU of no masks".into()));
    }
    let mut sum = 0.0;
    for (p, t) in preds.iter().zip(targets) {
        sum += iou(p.as_ref(), t.as_ref())?;
    }
    Ok(sum / preds.len() as f64)
}

/// One row of the per-image table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub model: String,
    pub precision: f64,
    pub recall: f64,
    /// Absent when the split holds a single class.
    pub auc: Option<f64>,
    pub confusion: ConfusionCounts,
}

impl ImageRow {
    pub fn score(model: &str, labels: &[u8], scores: &[f64], threshold: f64) -> Result<Self> {
        let preds: Vec<u8> = scores.iter().map(|&s| u8::from(s >= threshold)).collect();
        Self::score_with_labels(model, labels, scores, &preds)
    }

    /// Row from continuous scores (for AUC) and explicit hard predictions.
    pub fn score_with_labels(model: &str, labels: &[u8], scores: &[f64], preds: &[u8]) -> Result<Self> {
        let (c, w) = confusion_from_predictions(labels, preds)?;
        let auc = match roc_auc(scores, labels) {
            Ok(a) => Some(a),
            Err(PecadError::Invalid(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            model: model.to_string(),
            precision: weighted_precision(&c, &w),
            recall: weighted_recall(&c, &w),
            auc,
            confusion: c,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientSection {
    pub sensitivity: f64,
    pub specificity: f64,
    pub ppv: f64,
    pub npv: f64,
    pub confusion: PatientConfusion,
}

impl From<PatientConfusion> for PatientSection {
    fn from(pc: PatientConfusion) -> Self {
        let m = patient_metrics(&pc);
        Self {
            sensitivity: m.sensitivity,
            specificity: m.specificity,
            ppv: m.ppv,
            npv: m.npv,
            confusion: pc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_iou: Option<f64>,
    pub n_masked_images: usize,
}

/// The evaluation report written by `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub split: String,
    pub config_hash: String,
    pub threshold: f64,
    pub per_image: Vec<ImageRow>,
    pub per_patient: PatientSection,
    pub segmentation: SegmentationSection,
    pub model_digests: std::collections::BTreeMap<String, String>,
}
