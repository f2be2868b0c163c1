//! Independent reference implementations and fixtures shared by the integration tests.
#![allow(dead_code)]

use pecad::dataset::SliceLabel;
use pecad::nets::{Graph, ParamStore, Tensor, Var};
use pecad::phantom::{generate_study, PhantomSpec};
use pecad::preprocess::{study_records, LabeledStudy, PreprocConfig};
use pecad::dataset::SliceRecord;
use pecad::training::{EpochStats, LossKind, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod gradients;
pub mod invariants;
pub mod rules;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Class-weighted precision and recall by walking every sample once per class.
pub fn brute_weighted_precision_recall(labels: &[u8], preds: &[u8]) -> (f64, f64) {
    let n = labels.len() as f64;
    let (mut precision, mut recall) = (0.0, 0.0);
    for class in [0u8, 1] {
        let mut hit = 0usize;
        let mut predicted = 0usize;
        let mut actual = 0usize;
        for (&l, &p) in labels.iter().zip(preds) {
            if p == class {
                predicted += 1;
            }
            if l == class {
                actual += 1;
                if p == class {
                    hit += 1;
                }
            }
        }
        let weight = actual as f64 / n;
        if predicted > 0 {
            precision += weight * hit as f64 / predicted as f64;
        }
        if actual > 0 {
            recall += weight * hit as f64 / actual as f64;
        }
    }
    (precision, recall)
}

/// Mann-Whitney statistic over every positive/negative pair.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

pub fn brute_cascade(ens: f64, fp: Option<f64>, thr: f64) -> SliceLabel {
    let ens_says = ens >= thr;
    let fp_says = match fp {
        Some(p) => p >= thr,
        None => true,
    };
    if ens_says && fp_says {
        SliceLabel::Pe
    } else {
        SliceLabel::NonPe
    }
}

/// `(verdict, flagged slices)` by folding over the labels.
pub fn brute_verdict(labels: &[SliceLabel]) -> (SliceLabel, Vec<usize>) {
    let flagged: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == SliceLabel::Pe).collect();
    let any = labels.iter().fold(false, |acc, l| acc || matches!(l, SliceLabel::Pe));
    (if any { SliceLabel::Pe } else { SliceLabel::NonPe }, flagged)
}

/// Scalar re-derivation of the optimizer on f(w) = w², returning w after every step.
pub fn scalar_ranger_on_square(w0: f64, lr: f64, steps: usize) -> Vec<f64> {
    let (b1, b2, eps, k, alpha) = (0.9f64, 0.999f64, 1e-8, 6usize, 0.5);
    let rho_inf = 2.0 / (1.0 - b2) - 1.0;
    let (mut w, mut slow, mut m, mut v) = (w0, w0, 0.0, 0.0);
    let mut out = Vec::with_capacity(steps);
    for t in 1..=steps {
        let g = 2.0 * w;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t as i32));
        let rho = rho_inf - 2.0 * t as f64 * b2.powi(t as i32) / (1.0 - b2.powi(t as i32));
        if rho > 5.0 {
            let r = ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
            let v_hat = (v / (1.0 - b2.powi(t as i32))).sqrt();
            w -= lr * r * m_hat / (v_hat + eps);
        } else {
            w -= lr * m_hat;
        }
        if t % k == 0 {
            slow += alpha * (w - slow);
            w = slow;
        }
        out.push(w);
    }
    out
}

/// Gradients whose analytic and numeric norms both stay below this are zero
/// up to round-off (e.g. a BN shift feeding straight into another BN).
pub const ZERO_GRAD_NORM: f64 = 1e-7;

/// Relative error `‖a − n‖ / (‖a‖ + ‖n‖)`, 0 when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na + nn;
    if na < ZERO_GRAD_NORM && nn < ZERO_GRAD_NORM {
        0.0
    } else {
        diff / scale
    }
}

/// Worst relative error over the input and every parameter tensor.
#[derive(Debug)]
pub struct GradReport {
    pub worst: f64,
    pub worst_at: String,
    pub checked: usize,
}

/// Central-difference check of `sum(forward(x) · r)` for a fixed random `r`,
/// in training mode. At most `max_coords` coordinates per tensor are probed.
pub fn grad_check<F>(store: &ParamStore, x: &Tensor, forward: F, max_coords: usize, seed: u64) -> GradReport
where
    F: Fn(&mut Graph<'_>, Var) -> pecad::Result<Var>,
{
    const H: f64 = 1e-6;
    let objective = |store: &ParamStore, x: &Tensor, r: &Tensor| -> f64 {
        let mut g = Graph::new(store, true);
        let xv = g.input(x.clone());
        let y = forward(&mut g, xv).unwrap();
        g.value(y).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
    };
    let mut g = Graph::new(store, true);
    let xv = g.input(x.clone());
    let y = forward(&mut g, xv).unwrap();
    let mut rr = rng(seed);
    let r = random_tensor(g.value(y).shape(), &mut rr);
    let grads = g.backward(y, r.clone()).unwrap();
    let dx = grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let dparams = grads.dense(store);
    drop(g);

    let pick = |n: usize, rr: &mut ChaCha8Rng| -> Vec<usize> {
        if n <= max_coords {
            (0..n).collect()
        } else {
            (0..max_coords).map(|_| rr.random_range(0..n)).collect()
        }
    };
    let mut report = GradReport { worst: 0.0, worst_at: String::new(), checked: 0 };
    let note = |name: String, a: Vec<f64>, n: Vec<f64>, report: &mut GradReport| {
        report.checked += a.len();
        let e = relative_error(&a, &n);
        if e > report.worst {
            report.worst = e;
            report.worst_at = name;
        }
    };

    let idx = pick(x.numel(), &mut rr);
    let mut xp = x.clone();
    let (mut a, mut n) = (vec![], vec![]);
    for &i in &idx {
        let orig = xp.data()[i];
        xp.data_mut()[i] = orig + H;
        let fp = objective(store, &xp, &r);
        xp.data_mut()[i] = orig - H;
        let fm = objective(store, &xp, &r);
        xp.data_mut()[i] = orig;
        a.push(dx.data()[i]);
        n.push((fp - fm) / (2.0 * H));
    }
    note("input".into(), a, n, &mut report);

    let mut work = store.clone();
    for (pi, grad) in dparams.iter().enumerate() {
        let idx = pick(grad.numel(), &mut rr);
        let (mut a, mut n) = (vec![], vec![]);
        for &i in &idx {
            let orig = work.params()[pi].data()[i];
            work.params_mut()[pi].data_mut()[i] = orig + H;
            let fp = objective(&work, x, &r);
            work.params_mut()[pi].data_mut()[i] = orig - H;
            let fm = objective(&work, x, &r);
            work.params_mut()[pi].data_mut()[i] = orig;
            a.push(grad.data()[i]);
            n.push((fp - fm) / (2.0 * H));
        }
        note(store.param_names()[pi].clone(), a, n, &mut report);
    }
    report
}

/// Central-difference check of a loss's analytic gradient with respect to its predictions.
pub fn loss_grad_error<F>(pred: &[f64], loss: F) -> f64
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    const H: f64 = 1e-6;
    let (_, analytic) = loss(pred);
    let mut p = pred.to_vec();
    let numeric: Vec<f64> = (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + H;
            let fp = loss(&p).0;
            p[i] = orig - H;
            let fm = loss(&p).0;
            p[i] = orig;
            (fp - fm) / (2.0 * H)
        })
        .collect();
    relative_error(&analytic, &numeric)
}

/// Preprocessed slices of phantom studies with alternating PE status.
pub fn phantom_records(n_pe: usize, n_non_pe: usize, crop: usize, pe_only: bool) -> Vec<SliceRecord> {
    let cfg = PreprocConfig { crop_size: crop, ..Default::default() };
    let (mut pe, mut non) = (Vec::new(), Vec::new());
    let mut seed = 0u64;
    while pe.len() < n_pe || non.len() < n_non_pe {
        let spec = PhantomSpec { seed, pe: seed % 2 == 0, patient_id: format!("fx{seed}"), ..Default::default() };
        let study = generate_study(&spec).unwrap();
        let labeled = LabeledStudy::new(study.volume, Some(study.masks)).unwrap();
        for r in study_records(&labeled, &cfg).unwrap() {
            if r.label.is_pe() {
                if pe.len() < n_pe {
                    pe.push(r);
                }
            } else if non.len() < n_non_pe && !pe_only {
                non.push(r);
            }
        }
        seed += 1;
    }
    pe.extend(non);
    pe
}

/// Plain memorisation settings: no augmentation, no early stop.
pub fn overfit_config(loss: LossKind, batch_size: usize, max_epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        base_lr: 1e-2,
        max_epochs,
        batch_size,
        seed,
        loss,
        augment: false,
        early_stop_patience: 0,
        ..TrainConfig::default()
    }
}

/// First epoch whose metric on the (training) validation set reaches `target`.
pub fn first_epoch_reaching(history: &[EpochStats], target: f64) -> Option<usize> {
    history.iter().find(|s| s.val_metric >= target).map(|s| s.epoch)
}
