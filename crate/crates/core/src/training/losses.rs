//! Losses over probabilities, each returning its value and the gradient
//! with respect to the (unclamped) predictions.

use crate::error::{PecadError, Result};

/// Probabilities are clamped to `[PROB_EPS, 1 − PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossValue {
    fn add(mut self, other: LossValue) -> Self {
        self.value += other.value;
        for (a, b) in self.grad.iter_mut().zip(other.grad) {
            *a += b;
        }
        self
    }
}

fn check(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(PecadError::Shape(format!(
            "prediction has {} elements, target {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(PecadError::Shape("loss over an empty tensor".into()));
    }
    if let Some(p) = pred.iter().find(|p| !p.is_finite()) {
        return Err(PecadError::NonFinite(format!("prediction {p}")));
    }
    Ok(())
}

/// Clamped value and the derivative of the clamp.
fn clamp_prob(p: f64) -> (f64, f64) {
    if p < PROB_EPS {
        (PROB_EPS, 0.0)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, 0.0)
    } else {
        (p, 1.0)
    }
}

/// Mean binary cross-entropy.
pub fn bce(pred: &[f64], target: &[f64]) -> Result<LossValue> {
    check(pred, target)?;
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let (p, dp) = clamp_prob(p);
            value -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            dp * (-t / p + (1.0 - t) / (1.0 - p)) / n
        })
        .collect();
    Ok(LossValue { value: value / n, grad })
}

/// Mean focal binary cross-entropy `−α_t (1 − p_t)^γ ln p_t` for binary targets.
pub fn focal_bce(pred: &[f64], target: &[f64], gamma: f64, alpha: f64) -> Result<LossValue> {
    check(pred, target)?;
    if !(gamma >= 0.0 && alpha > 0.0 && alpha <= 1.0) {
        return Err(PecadError::Config(format!("focal gamma {gamma} / alpha {alpha} out of range")));
    }
    let n = pred.len() as f64;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let positive = if t == 1.0 {
            true
        } else if t == 0.0 {
            false
        } else {
            return Err(PecadError::Range(format!("focal target {t} is not 0 or 1")));
        };
        let (p, dp) = clamp_prob(p);
        let (pt, a, sign) = if positive { (p, alpha, 1.0) } else { (1.0 - p, 1.0 - alpha, -1.0) };
        let q = 1.0 - pt;
        let ln = pt.ln();
        value -= a * q.powf(gamma) * ln;
        let dq_term = if gamma == 0.0 { 0.0 } else { gamma * q.powf(gamma - 1.0) * ln };
        let d_pt = a * (dq_term - q.powf(gamma) / pt);
        grad.push(dp * sign * d_pt / n);
    }
    Ok(LossValue { value: value / n, grad })
}

/// `1 − (2Σpt + s) / (Σp + Σt + s)` over all elements.
pub fn dice_loss(pred: &[f64], target: &[f64], smooth: f64) -> Result<LossValue> {
    check(pred, target)?;
    if !(smooth > 0.0) {
        return Err(PecadError::Config(format!("dice smooth {smooth} must be positive")));
    }
    let inter: f64 = pred.iter().zip(target).map(|(p, t)| p * t).sum();
    let total: f64 = pred.iter().sum::<f64>() + target.iter().sum::<f64>();
    let num = 2.0 * inter + smooth;
    let den = total + smooth;
    let grad = target
        .iter()
        .map(|&t| -(2.0 * t * den - num) / (den * den))
        .collect();
    Ok(LossValue {
        value: 1.0 - num / den,
        grad,
    })
}

/// Unweighted sum of mean BCE and dice.
pub fn seg_loss(pred: &[f64], target: &[f64], smooth: f64) -> Result<LossValue> {
    Ok(bce(pred, target)?.add(dice_loss(pred, target, smooth)?))
}
