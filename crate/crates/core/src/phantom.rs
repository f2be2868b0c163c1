//! Synthetic CTPA-like studies with known emboli.
//!
//! Each slice holds an elliptical soft-tissue body in air, two lung
//! ellipses whose extent peaks mid-volume, and contrast-filled vessels whose
//! circular cross-sections turn together about the volume axis from slice to
//! slice. PE studies get a hypodense embolus concentric with one or two
//! vessels over a contiguous slice range, always leaving at least one ring of
//! contrast.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    save_mask, save_volume, CtVolume, DatasetManifest, ManifestEntry, MaskVolume, SliceLabel, SourceTag, HU_MAX,
    HU_MIN,
};
use crate::error::{PecadError, Result};

pub const HU_AIR: f64 = -1000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub seed: u64,
    pub patient_id: String,
    pub n_slices: usize,
    pub rows: usize,
    pub cols: usize,
    pub pe: bool,
    pub n_vessels: usize,
    pub hu_lung: f64,
    pub hu_soft: f64,
    pub hu_contrast: f64,
    pub hu_embolus: f64,
    pub noise_sigma_hu: f64,
    pub slice_thickness_mm: f64,
    pub pixel_spacing_mm: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            patient_id: "phantom".into(),
            n_slices: 12,
            rows: 72,
            cols: 72,
            pe: false,
            n_vessels: 3,
            hu_lung: -800.0,
            hu_soft: 40.0,
            hu_contrast: 300.0,
            hu_embolus: 50.0,
            noise_sigma_hu: 15.0,
            slice_thickness_mm: 8.0,
            pixel_spacing_mm: 0.49,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_slices < 4 {
            return Err(PecadError::Config(format!("n_slices {} < 4", self.n_slices)));
        }
        if self.rows < 64 || self.cols < 64 {
            return Err(PecadError::Config(format!("phantom {}x{} smaller than 64x64", self.rows, self.cols)));
        }
        if self.n_vessels == 0 {
            return Err(PecadError::Config("n_vessels must be >= 1".into()));
        }
        if self.hu_embolus >= self.hu_contrast {
            return Err(PecadError::Config("hu_embolus must be below hu_contrast".into()));
        }
        for (name, v) in [
            ("hu_lung", self.hu_lung),
            ("hu_soft", self.hu_soft),
            ("hu_contrast", self.hu_contrast),
            ("hu_embolus", self.hu_embolus),
        ] {
            if !(f64::from(HU_MIN)..=f64::from(HU_MAX)).contains(&v) {
                return Err(PecadError::Config(format!("{name} = {v} outside the CT range")));
            }
        }
        if !(self.noise_sigma_hu.is_finite() && self.noise_sigma_hu >= 0.0) {
            return Err(PecadError::Config("noise_sigma_hu must be non-negative".into()));
        }
        Ok(())
    }

    fn vessel_radius(&self) -> f64 {
        (self.rows.min(self.cols) as f64 / 9.0).max(4.0)
    }

    fn embolus_radius(&self) -> f64 {
        (self.vessel_radius() - 2.0).max(1.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomStudy {
    pub volume: CtVolume,
    /// Embolus voxels.
    pub masks: MaskVolume,
    pub labels: Vec<SliceLabel>,
    /// Contrast-filled vessel lumen voxels (embolus included).
    pub lumen: MaskVolume,
}

#[derive(Debug, Clone)]
struct Vessel {
    /// Polar position (radius, angle) about the image centre at zero twist.
    rho: f64,
    theta: f64,
    embolus: Option<(usize, usize)>,
}

/// The vessel layout turns rigidly about the image centre from slice to
/// slice, so separations hold on every slice once they hold on one.
#[derive(Debug, Clone, Copy)]
struct Twist {
    start: f64,
    span: f64,
}

impl Twist {
    fn angle(&self, z: usize, n: usize) -> f64 {
        self.start + self.span * z as f64 / (n - 1) as f64
    }
}

impl Vessel {
    fn center(&self, centre: (f64, f64), angle: f64) -> (f64, f64) {
        let a = self.theta + angle;
        (centre.0 + self.rho * a.sin(), centre.1 + self.rho * a.cos())
    }
}

fn lung_scale(z: usize, n: usize) -> f64 {
    0.3 + 0.7 * (PI * (z as f64 + 0.5) / n as f64).sin()
}

/// Largest centre distance at which a vessel stays inside the body outline.
fn max_vessel_rho(spec: &PhantomSpec) -> f64 {
    spec.rows.min(spec.cols) as f64 * 0.46 - spec.vessel_radius() - 2.0
}

fn place_vessels(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Vessel>> {
    let r_v = spec.vessel_radius();
    let min_sep = 2.0 * r_v + 3.0;
    let rho_max = max_vessel_rho(spec);
    let mut vessels: Vec<Vessel> = Vec::with_capacity(spec.n_vessels);
    for _ in 0..spec.n_vessels {
        let mut placed = None;
        if rho_max > 0.0 {
            for _attempt in 0..200 {
                let candidate = Vessel {
                    // uniform over the disc
                    rho: rho_max * rng.random::<f64>().sqrt(),
                    theta: rng.random_range(0.0..2.0 * PI),
                    embolus: None,
                };
                let a = candidate.center((0.0, 0.0), 0.0);
                let clear = vessels.iter().all(|other| {
                    let b = other.center((0.0, 0.0), 0.0);
                    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() >= min_sep
                });
                if clear {
                    placed = Some(candidate);
                    break;
                }
            }
        }
        match placed {
            Some(v) => vessels.push(v),
            None => {
                return Err(PecadError::Config(format!(
                    "cannot fit {} vessels of radius {r_v:.1} in a {}x{} phantom",
                    spec.n_vessels, spec.rows, spec.cols
                )))
            }
        }
    }
    Ok(vessels)
}

/// Deterministic synthetic study for `spec`.
pub fn generate_study(spec: &PhantomSpec) -> Result<PhantomStudy> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (n, rows, cols) = (spec.n_slices, spec.rows, spec.cols);
    let mut vessels = place_vessels(spec, &mut rng)?;
    let twist = Twist {
        start: rng.random_range(0.0..2.0 * PI),
        span: rng.random_range(PI / 4.0..=PI / 2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 },
    };

    if spec.pe {
        let n_emboli = if spec.n_vessels > 1 && rng.random_bool(0.5) { 2 } else { 1 };
        for v in vessels.iter_mut().take(n_emboli) {
            let len = rng.random_range((n / 4).max(1)..=(n / 2).max(1));
            let start = rng.random_range(0..=n - len);
            v.embolus = Some((start, (start + len).min(n)));
        }
    }

    let r_v = spec.vessel_radius();
    let r_e = spec.embolus_radius();
    let (cy, cx) = (rows as f64 / 2.0 - 0.5, cols as f64 / 2.0 - 0.5);
    let (body_ry, body_rx) = (rows as f64 * 0.46, cols as f64 * 0.46);
    let lung_dx = cols as f64 * 0.2;

    let plane = rows * cols;
    let mut clean = vec![0.0f64; n * plane];
    let mut masks = MaskVolume::empty((n, rows, cols));
    let mut lumen = MaskVolume::empty((n, rows, cols));
    for z in 0..n {
        let s = lung_scale(z, n);
        let (lung_ry, lung_rx) = (rows as f64 * 0.3 * s, cols as f64 * 0.15 * s);
        let angle = twist.angle(z, n);
        let centers: Vec<(f64, f64, bool)> = vessels
            .iter()
            .map(|v| {
                let (r, c) = v.center((cy, cx), angle);
                let emb = v.embolus.is_some_and(|(a, b)| (a..b).contains(&z));
                (r, c, emb)
            })
            .collect();
        for r in 0..rows {
            for c in 0..cols {
                let (y, x) = (r as f64, c as f64);
                let in_body = ((y - cy) / body_ry).powi(2) + ((x - cx) / body_rx).powi(2) <= 1.0;
                let mut hu = if in_body { spec.hu_soft } else { HU_AIR };
                if in_body {
                    for side in [-1.0, 1.0] {
                        let lx = cx + side * lung_dx;
                        if ((y - cy) / lung_ry).powi(2) + ((x - lx) / lung_rx).powi(2) <= 1.0 {
                            hu = spec.hu_lung;
                        }
                    }
                }
                let idx = z * plane + r * cols + c;
                for &(vr, vc, emb) in &centers {
                    let d = ((y - vr).powi(2) + (x - vc).powi(2)).sqrt();
                    if d <= r_v {
                        hu = spec.hu_contrast;
                        lumen.slice_mut(z)[r * cols + c] = 1;
                        if emb && d <= r_e {
                            hu = spec.hu_embolus;
                            masks.slice_mut(z)[r * cols + c] = 1;
                        }
                    }
                }
                clean[idx] = hu;
            }
        }
    }

    let voxels: Vec<i16> = if spec.noise_sigma_hu > 0.0 {
        let noise = Normal::new(0.0, spec.noise_sigma_hu).expect("validated sigma");
        clean
            .iter()
            .map(|&v| quantize(v + noise.sample(&mut rng)))
            .collect()
    } else {
        clean.iter().map(|&v| quantize(v)).collect()
    };
    let volume = CtVolume::new(
        spec.patient_id.clone(),
        spec.pe,
        (n, rows, cols),
        voxels,
        spec.slice_thickness_mm,
        spec.pixel_spacing_mm,
    )?;
    let labels = masks.slice_labels();
    Ok(PhantomStudy {
        volume,
        masks,
        labels,
        lumen,
    })
}

fn quantize(v: f64) -> i16 {
    v.round().clamp(f64::from(HU_MIN), f64::from(HU_MAX)) as i16
}

pub fn cohort_patient_id(index: usize, pe: bool) -> String {
    format!("ph{index:04}-{}", if pe { "pe" } else { "nonpe" })
}

/// Writes `n_pe` PE then `n_non_pe` non-PE studies (seed `base_seed + i`)
/// with their masks and a `manifest.json` into `out_dir`.
pub fn generate_cohort(
    n_pe: usize,
    n_non_pe: usize,
    base_seed: u64,
    template: &PhantomSpec,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    std::fs::create_dir_all(out_dir).map_err(|e| PecadError::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(n_pe + n_non_pe);
    for i in 0..n_pe + n_non_pe {
        let pe = i < n_pe;
        let id = cohort_patient_id(i, pe);
        let spec = PhantomSpec {
            seed: base_seed + i as u64,
            patient_id: id.clone(),
            pe,
            ..template.clone()
        };
        let study = generate_study(&spec)?;
        let vol_name = format!("{id}.ctvol.json");
        let mask_name = format!("{id}_mask.ctvol.json");
        save_volume(&study.volume, &out_dir.join(&vol_name))?;
        save_mask(&study.masks, &study.volume, &out_dir.join(&mask_name))?;
        entries.push(ManifestEntry {
            patient_id: id,
            volume: vol_name,
            pe_label: pe,
            mask: Some(mask_name),
        });
    }
    let manifest = DatasetManifest::new(SourceTag::Phantom, entries)?;
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}
