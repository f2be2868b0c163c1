//! Seeded mini-batch training with best-validation checkpointing.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{focal_bce, seg_loss, LossValue};
use super::optimizer::{Ranger, RangerConfig};
use crate::dataset::SliceRecord;
use crate::digest::sha256_hex;
use crate::error::{PecadError, Result};
use crate::metrics::iou;
use crate::nets::graph::BnObservation;
use crate::nets::{Checkpoint, Graph, Network, Tensor};
use crate::preprocess::augment_flip;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LossKind {
    FocalBce,
    BcePlusDice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: LossKind,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub dice_smooth: f64,
    pub lookahead_k: usize,
    pub lookahead_alpha: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    /// Random horizontal/vertical flips of training batches.
    pub augment: bool,
    /// Reset batch-norm running statistics from the training set after every epoch.
    pub recalibrate_bn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            max_epochs: 30,
            batch_size: 8,
            seed: 0,
            loss: LossKind::FocalBce,
            focal_gamma: 2.0,
            focal_alpha: 0.25,
            dice_smooth: 1.0,
            lookahead_k: 6,
            lookahead_alpha: 0.5,
            early_stop_patience: 10,
            augment: true,
            recalibrate_bn: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(PecadError::Config("batch_size must be >= 1".into()));
        }
        if !(self.focal_gamma >= 0.0) || !(self.focal_alpha > 0.0 && self.focal_alpha <= 1.0) {
            return Err(PecadError::Config("focal_gamma >= 0 and focal_alpha in (0, 1] required".into()));
        }
        if !(self.dice_smooth > 0.0) {
            return Err(PecadError::Config("dice_smooth must be positive".into()));
        }
        self.optimizer(self.base_lr).validate()
    }

    fn optimizer(&self, lr: f64) -> RangerConfig {
        RangerConfig {
            lr,
            lookahead_k: self.lookahead_k,
            lookahead_alpha: self.lookahead_alpha,
            ..RangerConfig::default()
        }
    }

    /// Cosine decay from `base_lr` over the epoch budget; `epoch` counts from 1.
    pub fn epoch_lr(&self, epoch: usize) -> f64 {
        let progress = (epoch.saturating_sub(1)) as f64 / self.max_epochs.max(1) as f64;
        self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }

    pub fn loss(&self, pred: &[f64], target: &[f64]) -> Result<LossValue> {
        match self.loss {
            LossKind::FocalBce => focal_bce(pred, target, self.focal_gamma, self.focal_alpha),
            LossKind::BcePlusDice => seg_loss(pred, target, self.dice_smooth),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Accuracy at 0.5 for classifiers, mean IoU for the segmenter.
    pub val_metric: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

fn is_dense(net: &dyn Network) -> bool {
    net.kind() == "segmenter"
}

fn check_records(net: &dyn Network, records: &[SliceRecord]) -> Result<()> {
    let spec = net.input_spec();
    for r in records {
        if r.image.shape() != [spec.height, spec.width] {
            return Err(PecadError::Shape(format!(
                "record {}/{} is {:?}, network expects {}x{}",
                r.patient_id,
                r.slice_index,
                r.image.shape(),
                spec.height,
                spec.width
            )));
        }
    }
    Ok(())
}

fn record_target(dense: bool, r: &SliceRecord, out: &mut Vec<f64>) {
    if dense {
        match &r.mask {
            Some(m) => out.extend(m.iter().map(|&v| f64::from(v))),
            None => out.extend(std::iter::repeat_n(0.0, r.image.numel())),
        }
    } else {
        out.push(f64::from(r.label.as_u8()));
    }
}

/// `[n, 1, h, w]` input batch.
pub fn batch_input(records: &[&SliceRecord]) -> Result<Tensor> {
    let images: Vec<&Tensor> = records.iter().map(|r| &r.image).collect();
    Tensor::stack_images(&images)
}

/// Inference-mode outputs for every record, in order.
pub fn predict_records(net: &dyn Network, records: &[SliceRecord], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    check_records(net, records)?;
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let refs: Vec<&SliceRecord> = chunk.iter().collect();
        let y = net.predict(&batch_input(&refs)?)?;
        let per = y.numel() / chunk.len();
        out.extend(y.data().chunks(per).map(<[f64]>::to_vec));
    }
    Ok(out)
}

/// Mean loss and the task metric in inference mode.
pub fn evaluate(net: &dyn Network, records: &[SliceRecord], config: &TrainConfig) -> Result<(f64, f64)> {
    if records.is_empty() {
        return Err(PecadError::Invalid("evaluation over no records".into()));
    }
    let dense = is_dense(net);
    let preds = predict_records(net, records, config.batch_size)?;
    let mut loss_sum = 0.0;
    let mut metric_sum = 0.0;
    for (chunk_p, chunk_r) in preds.chunks(config.batch_size).zip(records.chunks(config.batch_size)) {
        let pred: Vec<f64> = chunk_p.concat();
        let mut target = Vec::with_capacity(pred.len());
        for r in chunk_r {
            record_target(dense, r, &mut target);
        }
        loss_sum += config.loss(&pred, &target)?.value * chunk_r.len() as f64;
        for (p, r) in chunk_p.iter().zip(chunk_r) {
            metric_sum += if dense {
                let predicted: Vec<u8> = p.iter().map(|&v| u8::from(v >= 0.5)).collect();
                let truth = r.mask.clone().unwrap_or_else(|| vec![0; p.len()]);
                iou(&predicted, &truth)?
            } else {
                f64::from(u8::from((p[0] >= 0.5) == r.label.is_pe()))
            };
        }
    }
    let n = records.len() as f64;
    Ok((loss_sum / n, metric_sum / n))
}

/// Replace batch-norm running statistics by their average over training-mode
/// passes on `records` (no augmentation, fixed order).
pub fn recalibrate_bn(net: &mut dyn Network, records: &[SliceRecord], batch_size: usize) -> Result<()> {
    let mut sums: HashMap<usize, (BnObservation, usize)> = HashMap::new();
    let mut order = Vec::new();
    for chunk in records.chunks(batch_size.max(1)) {
        let refs: Vec<&SliceRecord> = chunk.iter().collect();
        let x = batch_input(&refs)?;
        let mut g = Graph::new(net.store(), true);
        let xi = g.input(x);
        net.forward(&mut g, xi)?;
        for (i, obs) in g.take_bn_observations().into_iter().enumerate() {
            match sums.get_mut(&i) {
                Some((acc, count)) => {
                    acc.mean.iter_mut().zip(&obs.mean).for_each(|(a, b)| *a += b);
                    acc.var_unbiased.iter_mut().zip(&obs.var_unbiased).for_each(|(a, b)| *a += b);
                    *count += 1;
                }
                None => {
                    order.push(i);
                    sums.insert(i, (obs, 1));
                }
            }
        }
    }
    let store = net.store_mut();
    for i in order {
        let (obs, count) = &sums[&i];
        let k = *count as f64;
        for (dst, src) in store.buffer_mut(obs.mean_buf).data_mut().iter_mut().zip(&obs.mean) {
            *dst = src / k;
        }
        for (dst, src) in store.buffer_mut(obs.var_buf).data_mut().iter_mut().zip(&obs.var_unbiased) {
            *dst = src / k;
        }
    }
    Ok(())
}

fn rng_digest(rng: &ChaCha8Rng) -> String {
    let mut bytes = rng.get_seed().to_vec();
    bytes.extend_from_slice(&rng.get_word_pos().to_le_bytes());
    bytes.extend_from_slice(&rng.get_stream().to_le_bytes());
    sha256_hex(&bytes)
}

fn metric_name(dense: bool) -> &'static str {
    if dense {
        "val_mean_iou"
    } else {
        "val_accuracy"
    }
}

/// Train `net` in place; on return it holds the best-validation weights.
///
/// An empty `val` set validates on the training records instead.
pub fn train_model(
    net: &mut dyn Network,
    train: &[SliceRecord],
    val: &[SliceRecord],
    config: &TrainConfig,
    log_path: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(PecadError::Invalid("training set is empty".into()));
    }
    check_records(net, train)?;
    check_records(net, val)?;
    let val = if val.is_empty() {
        log::warn!("no validation records; validating on the training set");
        train
    } else {
        val
    };
    let dense = is_dense(net);
    let mut log = match log_path {
        Some(p) => Some(BufWriter::new(File::create(p).map_err(|e| PecadError::io(p, e))?)),
        None => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let snapshot = |net: &dyn Network, epoch: usize, val_loss: f64, metric: f64, rng: &ChaCha8Rng| {
        let mut metrics = BTreeMap::new();
        metrics.insert("val_loss".to_string(), val_loss);
        metrics.insert(metric_name(dense).to_string(), metric);
        Checkpoint::capture(net, config.seed, epoch, metrics, rng_digest(rng))
    };

    let (init_loss, init_metric) = evaluate(net, val, config)?;
    if !init_loss.is_finite() {
        return Err(PecadError::NonFinite(format!("initial validation loss {init_loss}")));
    }
    let mut best = snapshot(net, 0, init_loss, init_metric, &rng);
    let mut best_loss = init_loss;
    let mut since_best = 0;
    let mut history = Vec::new();

    let mut optimizer = Ranger::new(net.store().params(), config.optimizer(config.base_lr))?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.max_epochs {
        let lr = config.epoch_lr(epoch);
        optimizer.set_lr(lr);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut images = Vec::with_capacity(chunk.len());
            let mut target = Vec::new();
            for &i in chunk {
                let r = &train[i];
                let (img, mask) = if config.augment {
                    augment_flip(&r.image, r.mask.as_deref(), &mut rng)?
                } else {
                    (r.image.clone(), r.mask.clone())
                };
                let rec = SliceRecord {
                    image: img,
                    mask,
                    ..r.clone()
                };
                record_target(dense, &rec, &mut target);
                images.push(rec.image);
            }
            let refs: Vec<&Tensor> = images.iter().collect();
            let x = Tensor::stack_images(&refs)?;
            let (grads, observations, loss) = {
                let mut g = Graph::new(net.store(), true);
                let xi = g.input(x);
                let y = net.forward(&mut g, xi)?;
                let out = g.value(y);
                let loss = config.loss(out.data(), &target)?;
                if !loss.value.is_finite() {
                    return Err(PecadError::NonFinite(format!("training loss at epoch {epoch}, step {step}")));
                }
                let seed = Tensor::new(out.shape().to_vec(), loss.grad)?;
                let grads = g.backward(y, seed)?.dense(net.store());
                (grads, g.take_bn_observations(), loss.value)
            };
            loss_sum += loss * chunk.len() as f64;
            optimizer.step(net.store_mut().params_mut(), &grads)?;
            crate::nets::graph::apply_bn_observations(net.store_mut(), &observations);
        }
        if config.recalibrate_bn {
            recalibrate_bn(net, train, config.batch_size)?;
        }
        let train_loss = loss_sum / train.len() as f64;
        let (val_loss, val_metric) = evaluate(net, val, config)?;
        if !val_loss.is_finite() {
            return Err(PecadError::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        let improved = val_loss < best_loss;
        if improved {
            best_loss = val_loss;
            best = snapshot(net, epoch, val_loss, val_metric, &rng);
            since_best = 0;
        } else {
            since_best += 1;
        }
        let stats = EpochStats {
            epoch,
            lr,
            train_loss,
            val_loss,
            val_metric,
            improved,
        };
        log::info!(
            "epoch {epoch}: lr {lr:.2e} train {train_loss:.5} val {val_loss:.5} {} {val_metric:.4}",
            metric_name(dense)
        );
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(&stats).map_err(|e| PecadError::format("training log", e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| PecadError::io(log_path.unwrap_or(Path::new("")), e))?;
        }
        history.push(stats);
        if config.early_stop_patience > 0 && since_best >= config.early_stop_patience {
            log::info!("early stop after epoch {epoch}");
            break;
        }
    }
    if let Some(mut w) = log {
        w.flush().map_err(|e| PecadError::io(log_path.unwrap_or(Path::new("")), e))?;
    }
    net.store_mut().load_values(&best.weights);
    Ok(TrainOutcome {
        checkpoint: best,
        history,
    })
}
