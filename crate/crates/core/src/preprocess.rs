//! Slice preparation: HU clamp and scaling, center crop, PE rebalancing,
//! flip augmentation and the lung-region filter used for the
//! false-positive-reduction training set.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CtVolume, MaskVolume, SliceLabel, SliceRecord};
use crate::error::{PecadError, Result};
use crate::nets::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocConfig {
    pub hu_limit: i32,
    pub crop_size: usize,
    pub upsample_factor: usize,
    pub lung_hu_band: (i16, i16),
    pub lung_area_fraction_min: f64,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        Self {
            hu_limit: 600,
            crop_size: 400,
            upsample_factor: 5,
            lung_hu_band: (-950, -300),
            lung_area_fraction_min: 0.10,
        }
    }
}

impl PreprocConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hu_limit <= 0 {
            return Err(PecadError::Config(format!("hu_limit must be positive, got {}", self.hu_limit)));
        }
        if self.crop_size == 0 || self.upsample_factor == 0 {
            return Err(PecadError::Config("crop_size and upsample_factor must be positive".into()));
        }
        if self.lung_hu_band.0 > self.lung_hu_band.1 {
            return Err(PecadError::Config("lung_hu_band must be (low, high)".into()));
        }
        if !(0.0..=1.0).contains(&self.lung_area_fraction_min) {
            return Err(PecadError::Config("lung_area_fraction_min must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Clamp to `[-hu_limit, hu_limit]`, divide by `hu_limit`.
pub fn hu_window_scale(slice: &[i16], rows: usize, cols: usize, hu_limit: i32) -> Result<Tensor> {
    if hu_limit <= 0 {
        return Err(PecadError::Config(format!("hu_limit must be positive, got {hu_limit}")));
    }
    let limit = f64::from(hu_limit);
    let data = slice
        .iter()
        .map(|&v| f64::from(v).clamp(-limit, limit) / limit)
        .collect();
    Tensor::new(vec![rows, cols], data)
}

/// Top-left corner of the centered `crop × crop` window.
pub fn crop_offsets(rows: usize, cols: usize, crop: usize) -> Result<(usize, usize)> {
    if rows < crop || cols < crop {
        return Err(PecadError::Shape(format!("{rows}x{cols} image is smaller than crop {crop}")));
    }
    Ok(((rows - crop) / 2, (cols - crop) / 2))
}

pub fn center_crop_raw<T: Copy>(data: &[T], rows: usize, cols: usize, crop: usize) -> Result<Vec<T>> {
    if data.len() != rows * cols {
        return Err(PecadError::Shape(format!("{} values for {rows}x{cols}", data.len())));
    }
    let (r0, c0) = crop_offsets(rows, cols, crop)?;
    let mut out = Vec::with_capacity(crop * crop);
    for r in r0..r0 + crop {
        out.extend_from_slice(&data[r * cols + c0..r * cols + c0 + crop]);
    }
    Ok(out)
}

pub fn center_crop(image: &Tensor, crop: usize) -> Result<Tensor> {
    let (rows, cols) = image.dims2()?;
    Tensor::new(vec![crop, crop], center_crop_raw(image.data(), rows, cols, crop)?)
}

/// Every PE record appears `factor` times (copies adjacent), NON_PE once.
pub fn rebalance_upsample(records: &[SliceRecord], factor: usize) -> Result<Vec<SliceRecord>> {
    if factor == 0 {
        return Err(PecadError::Config("upsample factor must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let copies = if r.label.is_pe() { factor } else { 1 };
        out.extend(std::iter::repeat_n(r, copies).cloned());
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Flips {
    pub horizontal: bool,
    pub vertical: bool,
}

impl Flips {
    /// Horizontal then vertical, each with probability 0.5.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let horizontal = rng.random_bool(0.5);
        let vertical = rng.random_bool(0.5);
        Self { horizontal, vertical }
    }
}

fn flip_raw<T: Copy>(data: &[T], rows: usize, cols: usize, flips: Flips) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for r in 0..rows {
        let sr = if flips.vertical { rows - 1 - r } else { r };
        for c in 0..cols {
            let sc = if flips.horizontal { cols - 1 - c } else { c };
            out.push(data[sr * cols + sc]);
        }
    }
    out
}

pub fn apply_flips(image: &Tensor, mask: Option<&[u8]>, flips: Flips) -> Result<(Tensor, Option<Vec<u8>>)> {
    let (rows, cols) = image.dims2()?;
    if let Some(m) = mask {
        if m.len() != rows * cols {
            return Err(PecadError::Shape(format!("mask has {} pixels, image {rows}x{cols}", m.len())));
        }
    }
    let img = Tensor::new(vec![rows, cols], flip_raw(image.data(), rows, cols, flips))?;
    Ok((img, mask.map(|m| flip_raw(m, rows, cols, flips))))
}

/// Random horizontal/vertical flips applied identically to image and mask.
pub fn augment_flip<R: Rng + ?Sized>(
    image: &Tensor,
    mask: Option<&[u8]>,
    rng: &mut R,
) -> Result<(Tensor, Option<Vec<u8>>)> {
    let flips = Flips::sample(rng);
    apply_flips(image, mask, flips)
}

/// Fraction of center-crop pixels whose HU lies in the lung band.
pub fn lung_fraction(volume: &CtVolume, slice: usize, config: &PreprocConfig) -> f64 {
    let crop = config.crop_size.min(volume.rows()).min(volume.cols());
    let window = center_crop_raw(volume.slice(slice), volume.rows(), volume.cols(), crop)
        .expect("crop clipped to the slice size");
    let (lo, hi) = config.lung_hu_band;
    let n = window.iter().filter(|&&v| (lo..=hi).contains(&v)).count();
    n as f64 / window.len() as f64
}

/// Slices whose lung-band area fraction reaches `lung_area_fraction_min`.
pub fn lung_region_slices(volume: &CtVolume, config: &PreprocConfig) -> Vec<usize> {
    (0..volume.n_slices())
        .filter(|&i| lung_fraction(volume, i, config) >= config.lung_area_fraction_min)
        .collect()
}

/// A study with per-slice labels and optional lesion masks.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledStudy {
    pub volume: CtVolume,
    pub slice_labels: Vec<SliceLabel>,
    pub masks: Option<MaskVolume>,
}

impl LabeledStudy {
    pub fn new(volume: CtVolume, masks: Option<MaskVolume>) -> Result<Self> {
        let slice_labels = match &masks {
            Some(m) => {
                if m.dims() != volume.dims() {
                    return Err(PecadError::Shape(format!(
                        "mask {:?} vs volume {:?}",
                        m.dims(),
                        volume.dims()
                    )));
                }
                m.slice_labels()
            }
            None if !volume.pe_label => vec![SliceLabel::NonPe; volume.n_slices()],
            None => {
                return Err(PecadError::Invalid(format!(
                    "PE study {} has no masks to derive slice labels from",
                    volume.patient_id
                )))
            }
        };
        Ok(Self {
            volume,
            slice_labels,
            masks,
        })
    }

    pub fn patient_id(&self) -> &str {
        &self.volume.patient_id
    }
}

/// Center crop then HU window of one slice.
pub fn preprocess_slice(volume: &CtVolume, index: usize, config: &PreprocConfig) -> Result<Tensor> {
    if index >= volume.n_slices() {
        return Err(PecadError::Range(format!(
            "slice {index} outside a {}-slice volume",
            volume.n_slices()
        )));
    }
    let cropped = center_crop_raw(volume.slice(index), volume.rows(), volume.cols(), config.crop_size)?;
    hu_window_scale(&cropped, config.crop_size, config.crop_size, config.hu_limit)
}

/// Crop and scale one slice (and its mask) into a record.
pub fn slice_record(study: &LabeledStudy, index: usize, config: &PreprocConfig) -> Result<SliceRecord> {
    let v = &study.volume;
    let image = preprocess_slice(v, index, config)?;
    let mask = match &study.masks {
        Some(m) => Some(center_crop_raw(m.slice(index), v.rows(), v.cols(), config.crop_size)?),
        None => None,
    };
    SliceRecord::new(v.patient_id.clone(), index, image, study.slice_labels[index], mask)
}

pub fn study_records(study: &LabeledStudy, config: &PreprocConfig) -> Result<Vec<SliceRecord>> {
    (0..study.volume.n_slices())
        .map(|i| slice_record(study, i, config))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpReductionSet {
    pub records: Vec<SliceRecord>,
    /// PE studies dropped because none of their slices is labeled PE.
    pub skipped_patients: Vec<String>,
}

/// PE slices of PE patients plus lung-region slices of non-PE patients.
pub fn build_fp_reduction_dataset(
    pe_studies: &[LabeledStudy],
    non_pe_studies: &[LabeledStudy],
    config: &PreprocConfig,
) -> Result<FpReductionSet> {
    let mut records = Vec::new();
    let mut skipped_patients = Vec::new();
    for study in pe_studies {
        let pe_slices: Vec<usize> = study
            .slice_labels
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_pe())
            .map(|(i, _)| i)
            .collect();
        if pe_slices.is_empty() {
            warn!("PE study {} has no PE-labeled slices; skipped", study.patient_id());
            skipped_patients.push(study.patient_id().to_string());
            continue;
        }
        for i in pe_slices {
            records.push(slice_record(study, i, config)?);
        }
    }
    for study in non_pe_studies {
        for i in lung_region_slices(&study.volume, config) {
            let mut r = slice_record(study, i, config)?;
            r.label = SliceLabel::NonPe;
            r.mask = None;
            records.push(r);
        }
    }
    Ok(FpReductionSet {
        records,
        skipped_patients,
    })
}
