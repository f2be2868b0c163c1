//! The deployed decision pipeline: ensemble scoring, false-positive veto,
//! any-positive patient verdict, and lesion overlays for flagged slices.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use image::{ImageEncoder, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::dataset::{CtVolume, SliceLabel};
use crate::error::{PecadError, Result};
use crate::nets::{Network, Tensor};
use crate::preprocess::{preprocess_slice, PreprocConfig};

/// Tint applied to lesion pixels.
pub const ALERT_COLOR: [u8; 3] = [255, 0, 0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TriageConfig {
    pub threshold: f64,
    pub mask_threshold: f64,
    pub batch_size: usize,
}

impl Default for TriageConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            mask_threshold: 0.5,
            batch_size: 8,
        }
    }
}

impl TriageConfig {
    pub fn validate(&self) -> Result<()> {
        check_threshold(self.threshold)?;
        check_threshold(self.mask_threshold)?;
        if self.batch_size == 0 {
            return Err(PecadError::Config("triage batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if (0.0..=1.0).contains(&t) {
        Ok(())
    } else {
        Err(PecadError::Config(format!("threshold {t} outside [0, 1]")))
    }
}

fn check_prob(p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(PecadError::Range(format!("probability {p} outside [0, 1]")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImagePrediction {
    #[serde(skip)]
    pub patient_id: String,
    #[serde(rename = "slice")]
    pub slice_index: usize,
    pub ensemble_prob: f64,
    #[serde(rename = "fp_prob")]
    pub fp_net_prob: Option<f64>,
    #[serde(rename = "label")]
    pub final_label: SliceLabel,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientVerdict {
    pub patient_id: String,
    pub verdict: SliceLabel,
    pub n_pe_images: usize,
    pub flagged_slices: Vec<usize>,
}

/// Unweighted mean of member probabilities, summed in sorted order so the
/// result does not depend on member order, and kept within the member range.
pub fn ensemble_mean(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(PecadError::Invalid("ensemble has no members".into()));
    }
    for &p in probs {
        check_prob(p)?;
    }
    let mut sorted = probs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    Ok(mean.clamp(sorted[0], sorted[sorted.len() - 1]))
}

/// Per-image ensemble probabilities for a `[n, c, h, w]` batch.
pub fn ensemble_predict(models: &[&dyn Network], batch: &Tensor) -> Result<Vec<f64>> {
    let first = models
        .first()
        .ok_or_else(|| PecadError::Invalid("ensemble has no members".into()))?;
    let spec = first.input_spec();
    if let Some(m) = models.iter().find(|m| m.input_spec() != spec) {
        return Err(PecadError::Shape(format!(
            "ensemble members disagree on input: {:?} vs {:?}",
            m.input_spec(),
            spec
        )));
    }
    let outputs: Vec<Tensor> = models.iter().map(|m| m.predict(batch)).collect::<Result<_>>()?;
    let n = batch.dims4()?.0;
    (0..n)
        .map(|i| {
            let probs: Vec<f64> = outputs.iter().map(|o| o.data()[i]).collect();
            ensemble_mean(&probs)
        })
        .collect()
}

/// PE iff the ensemble and (when present) the FP-reduction net both reach the threshold.
pub fn cascade_label(ensemble_prob: f64, fp_net_prob: Option<f64>, threshold: f64) -> Result<SliceLabel> {
    check_threshold(threshold)?;
    check_prob(ensemble_prob)?;
    if let Some(p) = fp_net_prob {
        check_prob(p)?;
    }
    let pe = ensemble_prob >= threshold && fp_net_prob.is_none_or(|p| p >= threshold);
    Ok(SliceLabel::from_bool(pe))
}

/// A patient is PE iff at least one image is.
pub fn patient_verdict(patient_id: &str, image_labels: &[SliceLabel]) -> Result<PatientVerdict> {
    if image_labels.is_empty() {
        return Err(PecadError::Invalid(format!("study {patient_id} has no images")));
    }
    let flagged_slices: Vec<usize> = image_labels
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_pe())
        .map(|(i, _)| i)
        .collect();
    Ok(PatientVerdict {
        patient_id: patient_id.to_string(),
        verdict: SliceLabel::from_bool(!flagged_slices.is_empty()),
        n_pe_images: flagged_slices.len(),
        flagged_slices,
    })
}

pub fn threshold_mask(probs: &[f64], threshold: f64) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= threshold)).collect()
}

/// Binary masks for the flagged images, in the order given.
pub fn segment_flagged(
    images: &[Tensor],
    segmenter: &dyn Network,
    flagged_slices: &[usize],
    mask_threshold: f64,
) -> Result<Vec<(usize, Vec<u8>)>> {
    check_threshold(mask_threshold)?;
    let mut out = Vec::with_capacity(flagged_slices.len());
    for &i in flagged_slices {
        let image = images
            .get(i)
            .ok_or_else(|| PecadError::Range(format!("flagged slice {i} outside the study")))?;
        let map = segmenter.predict(&Tensor::stack_images(&[image])?)?;
        out.push((i, threshold_mask(map.data(), mask_threshold)));
    }
    Ok(out)
}

/// Grayscale render of `[-1, 1]` intensities with mask pixels blended 50/50
/// with [`ALERT_COLOR`].
pub fn render_overlay(image: &Tensor, mask: &[u8]) -> Result<RgbImage> {
    let (rows, cols) = image.dims2()?;
    if mask.len() != rows * cols {
        return Err(PecadError::Shape(format!(
            "overlay mask has {} pixels, image {rows}x{cols}",
            mask.len()
        )));
    }
    let mut out = RgbImage::new(cols as u32, rows as u32);
    for (i, (&v, &m)) in image.data().iter().zip(mask).enumerate() {
        let g = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8;
        let px = if m != 0 {
            let blend = |c: u8| ((u16::from(g) + u16::from(c)) / 2) as u8;
            [blend(ALERT_COLOR[0]), blend(ALERT_COLOR[1]), blend(ALERT_COLOR[2])]
        } else {
            [g, g, g]
        };
        out.put_pixel((i % cols) as u32, (i / cols) as u32, Rgb(px));
    }
    Ok(out)
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    image::codecs::png::PngEncoder::new(&mut bytes)
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| PecadError::format("png", e.to_string()))?;
    Ok(bytes)
}

pub fn overlay_file_name(patient_id: &str, slice: usize) -> String {
    format!("{patient_id}_{slice}.png")
}

/// Loaded networks used by the pipeline.
pub struct TriageModels<'a> {
    pub ensemble: Vec<&'a dyn Network>,
    pub fp_net: Option<&'a dyn Network>,
    pub segmenter: Option<&'a dyn Network>,
    pub model_digests: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageReport {
    pub patient_id: String,
    pub verdict: SliceLabel,
    pub threshold: f64,
    pub per_image: Vec<ImagePrediction>,
    pub flagged: Vec<usize>,
    /// File names relative to the report's directory.
    pub overlay_paths: Vec<String>,
    pub model_digests: BTreeMap<String, String>,
    pub config_hash: String,
    pub timing: Timing,
}

impl TriageReport {
    pub fn report_file_name(patient_id: &str) -> String {
        format!("{patient_id}_triage.json")
    }

    /// The report as JSON with the timing field zeroed.
    pub fn without_timing(&self) -> Self {
        Self {
            timing: Timing { elapsed_ms: 0.0 },
            ..self.clone()
        }
    }
}

/// Image and FP-net probabilities for every slice, in index order.
pub fn score_slices(
    images: &[Tensor],
    models: &TriageModels<'_>,
    batch_size: usize,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let mut ens = Vec::with_capacity(images.len());
    let mut fp = models.fp_net.map(|_| Vec::with_capacity(images.len()));
    for chunk in images.chunks(batch_size.max(1)) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        let batch = Tensor::stack_images(&refs)?;
        ens.extend(ensemble_predict(&models.ensemble, &batch)?);
        if let (Some(net), Some(out)) = (models.fp_net, fp.as_mut()) {
            out.extend_from_slice(net.predict(&batch)?.data());
        }
    }
    Ok((ens, fp))
}

/// Full pipeline on one study; writes overlays and the JSON report into `out_dir`.
pub fn run_triage(
    volume: &CtVolume,
    models: &TriageModels<'_>,
    preprocess: &PreprocConfig,
    config: &TriageConfig,
    config_hash: &str,
    out_dir: &Path,
) -> Result<TriageReport> {
    let start = Instant::now();
    config.validate()?;
    preprocess.validate()?;
    let images: Vec<Tensor> = (0..volume.n_slices())
        .map(|i| preprocess_slice(volume, i, preprocess))
        .collect::<Result<_>>()?;
    let (ens, fp) = score_slices(&images, models, config.batch_size)?;
    let per_image: Vec<ImagePrediction> = ens
        .iter()
        .enumerate()
        .map(|(i, &e)| {
            let f = fp.as_ref().map(|v| v[i]);
            Ok(ImagePrediction {
                patient_id: volume.patient_id.clone(),
                slice_index: i,
                ensemble_prob: e,
                fp_net_prob: f,
                final_label: cascade_label(e, f, config.threshold)?,
            })
        })
        .collect::<Result<_>>()?;
    let labels: Vec<SliceLabel> = per_image.iter().map(|p| p.final_label).collect();
    let verdict = patient_verdict(&volume.patient_id, &labels)?;

    fs::create_dir_all(out_dir).map_err(|e| PecadError::io(out_dir, e))?;
    let masks: BTreeMap<usize, Vec<u8>> = match models.segmenter {
        Some(seg) => segment_flagged(&images, seg, &verdict.flagged_slices, config.mask_threshold)?
            .into_iter()
            .collect(),
        None => BTreeMap::new(),
    };
    let mut overlay_paths = Vec::with_capacity(verdict.flagged_slices.len());
    for &i in &verdict.flagged_slices {
        let empty;
        let mask = match masks.get(&i) {
            Some(m) => m.as_slice(),
            None => {
                empty = vec![0u8; images[i].numel()];
                &empty
            }
        };
        let name = overlay_file_name(&volume.patient_id, i);
        let path = out_dir.join(&name);
        let png = encode_png(&render_overlay(&images[i], mask)?)?;
        fs::write(&path, png).map_err(|e| PecadError::io(&path, e))?;
        overlay_paths.push(name);
    }

    let report = TriageReport {
        patient_id: volume.patient_id.clone(),
        verdict: verdict.verdict,
        threshold: config.threshold,
        per_image,
        flagged: verdict.flagged_slices,
        overlay_paths,
        model_digests: models.model_digests.clone(),
        config_hash: config_hash.to_string(),
        timing: Timing {
            elapsed_ms: start.elapsed().as_secs_f64() * 1000.0,
        },
    };
    let path = out_dir.join(TriageReport::report_file_name(&volume.patient_id));
    let json = serde_json::to_string_pretty(&report).map_err(|e| PecadError::format("triage report", e.to_string()))?;
    fs::write(&path, json + "\n").map_err(|e| PecadError::io(&path, e))?;
    Ok(report)
}
