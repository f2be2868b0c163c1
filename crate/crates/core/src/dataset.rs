//! Portable volume/mask files, dataset manifests and patient-level splits.
//!
//! A volume is a `<name>.ctvol.json` header next to `<name>.ctvol.raw`, which
//! holds `n_slices·rows·cols` little-endian `int16` HU values in
//! slice-row-col order. Masks use the same pair with `dtype: "uint8"`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PecadError, Result};
use crate::nets::Tensor;

pub const HU_MIN: i16 = -2048;
pub const HU_MAX: i16 = 4095;

const HEADER_SUFFIX: &str = ".ctvol.json";
const RAW_SUFFIX: &str = ".ctvol.raw";

/// A patient's CT study in Hounsfield units, indexed `(slice, row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CtVolume {
    pub patient_id: String,
    pub pe_label: bool,
    pub slice_thickness_mm: f64,
    pub pixel_spacing_mm: f64,
    n_slices: usize,
    rows: usize,
    cols: usize,
    voxels: Vec<i16>,
}

impl CtVolume {
    pub fn new(
        patient_id: impl Into<String>,
        pe_label: bool,
        dims: (usize, usize, usize),
        voxels: Vec<i16>,
        slice_thickness_mm: f64,
        pixel_spacing_mm: f64,
    ) -> Result<Self> {
        let (n_slices, rows, cols) = dims;
        if n_slices == 0 || rows == 0 || cols == 0 {
            return Err(PecadError::Invalid(format!("volume dimensions {dims:?} must be positive")));
        }
        if voxels.len() != n_slices * rows * cols {
            return Err(PecadError::Shape(format!(
                "volume {dims:?} needs {} voxels, got {}",
                n_slices * rows * cols,
                voxels.len()
            )));
        }
        for (name, v) in [("slice_thickness_mm", slice_thickness_mm), ("pixel_spacing_mm", pixel_spacing_mm)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(PecadError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if let Some((i, v)) = voxels.iter().enumerate().find(|(_, &v)| !(HU_MIN..=HU_MAX).contains(&v)) {
            return Err(PecadError::Range(format!(
                "voxel {i} = {v} HU outside [{HU_MIN}, {HU_MAX}]"
            )));
        }
        Ok(Self {
            patient_id: patient_id.into(),
            pe_label,
            slice_thickness_mm,
            pixel_spacing_mm,
            n_slices,
            rows,
            cols,
            voxels,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n_slices, self.rows, self.cols)
    }

    pub fn n_slices(&self) -> usize {
        self.n_slices
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn voxels(&self) -> &[i16] {
        &self.voxels
    }

    pub fn slice(&self, index: usize) -> &[i16] {
        let n = self.rows * self.cols;
        &self.voxels[index * n..(index + 1) * n]
    }
}

/// Per-slice binary lesion masks for one study.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVolume {
    n_slices: usize,
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl MaskVolume {
    pub fn new(dims: (usize, usize, usize), data: Vec<u8>) -> Result<Self> {
        let (n_slices, rows, cols) = dims;
        if data.len() != n_slices * rows * cols {
            return Err(PecadError::Shape(format!("mask {dims:?} vs {} values", data.len())));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(PecadError::Range(format!("mask value {v} not in {{0,1}}")));
        }
        Ok(Self {
            n_slices,
            rows,
            cols,
            data,
        })
    }

    pub fn empty(dims: (usize, usize, usize)) -> Self {
        Self {
            n_slices: dims.0,
            rows: dims.1,
            cols: dims.2,
            data: vec![0; dims.0 * dims.1 * dims.2],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n_slices, self.rows, self.cols)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn slice(&self, index: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.data[index * n..(index + 1) * n]
    }

    pub fn slice_mut(&mut self, index: usize) -> &mut [u8] {
        let n = self.rows * self.cols;
        &mut self.data[index * n..(index + 1) * n]
    }

    /// Slice-level labels: PE iff the slice mask is non-empty.
    pub fn slice_labels(&self) -> Vec<SliceLabel> {
        (0..self.n_slices)
            .map(|i| SliceLabel::from_bool(self.slice(i).iter().any(|&v| v != 0)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeHeader {
    pub patient_id: String,
    pub pe_label: bool,
    pub n_slices: usize,
    pub rows: usize,
    pub cols: usize,
    pub slice_thickness_mm: f64,
    pub pixel_spacing_mm: f64,
    pub dtype: String,
    pub order: String,
}

/// Header and raw paths for a path naming either file of the pair or their stem.
pub fn volume_paths(path: &Path) -> (PathBuf, PathBuf) {
    let s = path.to_string_lossy();
    let stem = s
        .strip_suffix(HEADER_SUFFIX)
        .or_else(|| s.strip_suffix(RAW_SUFFIX))
        .unwrap_or(&s)
        .to_string();
    (
        PathBuf::from(format!("{stem}{HEADER_SUFFIX}")),
        PathBuf::from(format!("{stem}{RAW_SUFFIX}")),
    )
}

fn read_header(path: &Path, dtype: &str) -> Result<(VolumeHeader, Vec<u8>)> {
    let (header_path, raw_path) = volume_paths(path);
    let text = fs::read_to_string(&header_path).map_err(|e| PecadError::io(&header_path, e))?;
    let header: VolumeHeader =
        serde_json::from_str(&text).map_err(|e| PecadError::format("volume header", e.to_string()))?;
    if header.dtype != dtype {
        return Err(PecadError::format(
            "volume header",
            format!("dtype {} (expected {dtype})", header.dtype),
        ));
    }
    if header.order != "slice-row-col" {
        return Err(PecadError::format("volume header", format!("order {}", header.order)));
    }
    let raw = fs::read(&raw_path).map_err(|e| PecadError::io(&raw_path, e))?;
    let elem = if dtype == "uint8" { 1 } else { 2 };
    let expected = header.n_slices * header.rows * header.cols * elem;
    if raw.len() != expected {
        return Err(PecadError::format(
            "volume raw data",
            format!("{} has {} bytes, header implies {expected}", raw_path.display(), raw.len()),
        ));
    }
    Ok((header, raw))
}

fn write_pair(path: &Path, header: &VolumeHeader, raw: &[u8]) -> Result<PathBuf> {
    let (header_path, raw_path) = volume_paths(path);
    if let Some(dir) = header_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| PecadError::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(header).expect("header serialises") + "\n";
    fs::write(&header_path, text).map_err(|e| PecadError::io(&header_path, e))?;
    fs::write(&raw_path, raw).map_err(|e| PecadError::io(&raw_path, e))?;
    Ok(header_path)
}

pub fn load_volume(path: &Path) -> Result<CtVolume> {
    let (h, raw) = read_header(path, "int16-le")?;
    let voxels = raw
        .chunks_exact(2)
        .map(|b| i16::from_le_bytes([b[0], b[1]]))
        .collect();
    CtVolume::new(
        h.patient_id,
        h.pe_label,
        (h.n_slices, h.rows, h.cols),
        voxels,
        h.slice_thickness_mm,
        h.pixel_spacing_mm,
    )
}

/// Writes the header/raw pair; returns the header path.
pub fn save_volume(volume: &CtVolume, path: &Path) -> Result<PathBuf> {
    let header = VolumeHeader {
        patient_id: volume.patient_id.clone(),
        pe_label: volume.pe_label,
        n_slices: volume.n_slices,
        rows: volume.rows,
        cols: volume.cols,
        slice_thickness_mm: volume.slice_thickness_mm,
        pixel_spacing_mm: volume.pixel_spacing_mm,
        dtype: "int16-le".into(),
        order: "slice-row-col".into(),
    };
    let raw: Vec<u8> = volume.voxels.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_pair(path, &header, &raw)
}

pub fn load_mask(path: &Path) -> Result<MaskVolume> {
    let (h, raw) = read_header(path, "uint8")?;
    MaskVolume::new((h.n_slices, h.rows, h.cols), raw)
}

/// Masks share the volume header layout; `volume` supplies the metadata.
pub fn save_mask(mask: &MaskVolume, volume: &CtVolume, path: &Path) -> Result<PathBuf> {
    if mask.dims() != volume.dims() {
        return Err(PecadError::Shape(format!(
            "mask {:?} vs volume {:?}",
            mask.dims(),
            volume.dims()
        )));
    }
    let header = VolumeHeader {
        patient_id: volume.patient_id.clone(),
        pe_label: volume.pe_label,
        n_slices: mask.n_slices,
        rows: mask.rows,
        cols: mask.cols,
        slice_thickness_mm: volume.slice_thickness_mm,
        pixel_spacing_mm: volume.pixel_spacing_mm,
        dtype: "uint8".into(),
        order: "slice-row-col".into(),
    };
    write_pair(path, &header, &mask.data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SliceLabel {
    Pe,
    NonPe,
}

impl SliceLabel {
    pub fn from_bool(pe: bool) -> Self {
        if pe {
            Self::Pe
        } else {
            Self::NonPe
        }
    }

    pub fn is_pe(self) -> bool {
        self == Self::Pe
    }

    pub fn as_u8(self) -> u8 {
        u8::from(self.is_pe())
    }
}

/// One preprocessed 2D image ready for a network.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceRecord {
    pub patient_id: String,
    pub slice_index: usize,
    /// `[rows, cols]`, values in `[-1, 1]`.
    pub image: Tensor,
    pub label: SliceLabel,
    /// Row-major, same size as `image`.
    pub mask: Option<Vec<u8>>,
}

impl SliceRecord {
    pub fn new(
        patient_id: impl Into<String>,
        slice_index: usize,
        image: Tensor,
        label: SliceLabel,
        mask: Option<Vec<u8>>,
    ) -> Result<Self> {
        image.dims2()?;
        if let Some(v) = image.data().iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(PecadError::Range(format!("image value {v} outside [-1, 1]")));
        }
        if let Some(m) = &mask {
            if m.len() != image.numel() {
                return Err(PecadError::Shape(format!(
                    "mask has {} pixels, image {}",
                    m.len(),
                    image.numel()
                )));
            }
            if label == SliceLabel::NonPe && m.iter().any(|&v| v != 0) {
                return Err(PecadError::Invalid("non-empty mask on a NON_PE slice".into()));
            }
        }
        Ok(Self {
            patient_id: patient_id.into(),
            slice_index,
            image,
            label,
            mask,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceTag {
    Clinical,
    Open,
    Phantom,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patient_id: String,
    /// Header path, relative to the manifest's directory unless absolute.
    pub volume: String,
    pub pe_label: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub source_tag: SourceTag,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(source_tag: SourceTag, entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { source_tag, entries };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(e.patient_id.as_str()) {
                return Err(PecadError::Invalid(format!("duplicate patient_id {}", e.patient_id)));
            }
        }
        Ok(())
    }

    pub fn entry(&self, patient_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.patient_id == patient_id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PecadError::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| PecadError::format("manifest", e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises") + "\n";
        fs::write(path, text).map_err(|e| PecadError::io(path, e))
    }
}

pub fn resolve(base_dir: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base_dir.join(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = PecadError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(PecadError::Invalid(format!("unknown split {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub assignment: BTreeMap<String, Split>,
}

impl SplitAssignment {
    pub fn patients(&self, split: Split) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0; 3];
        for s in self.assignment.values() {
            c[*s as usize] += 1;
        }
        c
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| PecadError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| PecadError::format("split", e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("split serialises") + "\n";
        fs::write(path, text).map_err(|e| PecadError::io(path, e))
    }
}

/// Patient-level train/val/test split.
///
/// VAL and TEST receive `round(N·ratio)` patients and TRAIN the remainder.
/// Patients are taken in sorted id order and shuffled with a ChaCha8 stream
/// seeded by `seed`.
pub fn split_by_patient(manifest: &DatasetManifest, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if manifest.entries.is_empty() {
        return Err(PecadError::Invalid("cannot split an empty manifest".into()));
    }
    manifest.validate()?;
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(PecadError::Invalid(format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let mut ids: Vec<&str> = manifest.entries.iter().map(|e| e.patient_id.as_str()).collect();
    ids.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let n = ids.len();
    let n_val = ((n as f64 * ratios[1]).round() as usize).min(n);
    let n_test = ((n as f64 * ratios[2]).round() as usize).min(n - n_val);
    let n_train = n - n_val - n_test;

    let assignment = ids
        .iter()
        .enumerate()
        .map(|(i, id)| {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (id.to_string(), split)
        })
        .collect();
    Ok(SplitAssignment {
        seed,
        ratios,
        assignment,
    })
}
