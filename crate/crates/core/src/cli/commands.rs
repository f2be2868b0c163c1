//! `synth`, `split`, `train`, `eval` and `triage`, callable without a shell.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use super::config::{RunConfig, Target};
use crate::dataset::{
    load_mask, load_volume, resolve, split_by_patient, DatasetManifest, SliceRecord, Split, SplitAssignment,
};
use crate::error::{PecadError, Result};
use crate::metrics::{iou, EvaluationReport, ImageRow, PatientConfusion, PatientSection, SegmentationSection};
use crate::nets::{Checkpoint, Classifier, Network, Segmenter};
use crate::phantom::generate_cohort;
use crate::preprocess::{build_fp_reduction_dataset, rebalance_upsample, study_records, LabeledStudy};
use crate::training::{predict_records, train_model};
use crate::triage::{cascade_label, ensemble_mean, threshold_mask, run_triage, TriageModels, TriageReport};

/// Names of the four per-image rows, in report order.
pub const ROW_DRN: &str = "DRN";
pub const ROW_MIXNET: &str = "MixNet";
pub const ROW_ENSEMBLE: &str = "Ensemble";
pub const ROW_ENSEMBLE_FP: &str = "Ensemble with false-positive reduction";

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| PecadError::io(path, e))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path, what: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| PecadError::format(what, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| PecadError::io(path, e))
}

/// Writes a phantom cohort into the data directory and returns the manifest path.
pub fn cmd_synth(config: &RunConfig) -> Result<PathBuf> {
    let (n_pe, n_non_pe) = (config.phantom.n_pe, config.phantom.n_non_pe);
    if n_pe + n_non_pe == 0 {
        return Err(PecadError::Invalid("empty cohort: --pe and --non-pe are both 0".into()));
    }
    let manifest_path = config.manifest_path();
    let dir = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let manifest = generate_cohort(n_pe, n_non_pe, config.seed, &config.phantom.template, &dir)?;
    if manifest_path != dir.join("manifest.json") {
        manifest.save(&manifest_path)?;
    }
    info!("wrote {} studies to {}", manifest.entries.len(), dir.display());
    Ok(manifest_path)
}

pub fn load_manifest(config: &RunConfig) -> Result<(DatasetManifest, PathBuf)> {
    let path = config.manifest_path();
    let manifest = DatasetManifest::load(&path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, base))
}

pub fn cmd_split(config: &RunConfig) -> Result<PathBuf> {
    let (manifest, _) = load_manifest(config)?;
    let split = split_by_patient(&manifest, config.dataset.split_ratios, config.seed)?;
    let path = config.split_path();
    write_json(&split, &path, "split")?;
    let [tr, va, te] = split.counts();
    info!("split {tr}/{va}/{te} patients -> {}", path.display());
    Ok(path)
}

/// Studies of one split, in sorted patient order.
pub fn load_split_studies(config: &RunConfig, split: Split) -> Result<Vec<LabeledStudy>> {
    let (manifest, base) = load_manifest(config)?;
    let assignment = SplitAssignment::load(&config.split_path())?;
    let mut studies = Vec::new();
    for id in assignment.patients(split) {
        let entry = manifest
            .entry(id)
            .ok_or_else(|| PecadError::Invalid(format!("split patient {id} missing from the manifest")))?;
        let volume = load_volume(&resolve(&base, &entry.volume))?;
        if volume.pe_label != entry.pe_label {
            return Err(PecadError::Invalid(format!(
                "patient {id}: manifest and volume header disagree on the PE label"
            )));
        }
        let mask = match &entry.mask {
            Some(m) => Some(load_mask(&resolve(&base, m))?),
            None => None,
        };
        studies.push(LabeledStudy::new(volume, mask)?);
    }
    Ok(studies)
}

fn records_of(studies: &[LabeledStudy], config: &RunConfig) -> Result<Vec<SliceRecord>> {
    let mut out = Vec::new();
    for s in studies {
        out.extend(study_records(s, &config.preprocess)?);
    }
    Ok(out)
}

fn masked_pe_records(studies: &[LabeledStudy], config: &RunConfig) -> Result<Vec<SliceRecord>> {
    Ok(records_of(studies, config)?
        .into_iter()
        .filter(|r| r.label.is_pe() && r.mask.as_ref().is_some_and(|m| m.iter().any(|&v| v != 0)))
        .collect())
}

fn fp_records(studies: &[LabeledStudy], config: &RunConfig) -> Result<Vec<SliceRecord>> {
    let (pe, non): (Vec<LabeledStudy>, Vec<LabeledStudy>) =
        studies.iter().cloned().partition(|s| s.volume.pe_label);
    Ok(build_fp_reduction_dataset(&pe, &non, &config.preprocess)?.records)
}

/// Training and validation records for `target`.
pub fn target_records(config: &RunConfig, target: Target) -> Result<(Vec<SliceRecord>, Vec<SliceRecord>)> {
    let train = load_split_studies(config, Split::Train)?;
    let val = load_split_studies(config, Split::Val)?;
    let factor = config.preprocess.upsample_factor;
    match target {
        Target::Drn | Target::Mixnet => Ok((
            rebalance_upsample(&records_of(&train, config)?, factor)?,
            records_of(&val, config)?,
        )),
        Target::FpNet => {
            let tr = fp_records(&train, config)?;
            if !tr.iter().any(|r| r.label.is_pe()) {
                return Err(PecadError::Invalid(
                    "false-positive reduction set has no PE images (no PE patients in TRAIN)".into(),
                ));
            }
            Ok((rebalance_upsample(&tr, factor)?, fp_records(&val, config)?))
        }
        Target::Segmenter => {
            let tr = masked_pe_records(&train, config)?;
            if tr.is_empty() {
                return Err(PecadError::Invalid("no masked PE images in TRAIN for the segmenter".into()));
            }
            Ok((tr, masked_pe_records(&val, config)?))
        }
    }
}

/// A freshly initialised network for `target`.
pub fn build_network(config: &RunConfig, target: Target) -> Result<Box<dyn Network>> {
    let seed = config.seed.wrapping_add(target.seed_offset());
    Ok(match target {
        Target::Segmenter => Box::new(Segmenter::build(&config.segmenter_config(), seed)?),
        t => Box::new(Classifier::build(&config.classifier_config(t)?, seed)?),
    })
}

/// Network for `target` with weights from its checkpoint (config hash verified).
pub fn load_network(config: &RunConfig, target: Target) -> Result<(Box<dyn Network>, Checkpoint)> {
    let path = config.checkpoint_path(target);
    if !path.exists() {
        return Err(PecadError::Invalid(format!(
            "missing {} checkpoint {}; run `pecad train {}` first",
            target.name(),
            path.display(),
            target.name()
        )));
    }
    let ckpt = Checkpoint::load(&path)?;
    let mut net = build_network(config, target)?;
    ckpt.restore_into(net.as_mut())?;
    Ok((net, ckpt))
}

pub fn cmd_train(config: &RunConfig, target: Target) -> Result<PathBuf> {
    let path = config.checkpoint_path(target);
    let mut net = build_network(config, target)?;
    if path.exists() {
        let existing = Checkpoint::load(&path)?;
        if existing.meta.config_hash != net.config_hash() {
            return Err(PecadError::HashMismatch {
                expected: net.config_hash(),
                found: existing.meta.config_hash,
            });
        }
    }
    let (train, val) = target_records(config, target)?;
    if target == Target::FpNet && config.training.fp_warm_start {
        let drn = config.checkpoint_path(Target::Drn);
        if !drn.exists() {
            return Err(PecadError::Invalid(format!(
                "fp_warm_start needs the drn checkpoint {}; run `pecad train drn` first",
                drn.display()
            )));
        }
        Checkpoint::load(&drn)?.restore_into(net.as_mut())?;
        info!("fpnet starts from {}", drn.display());
    }
    info!(
        "training {} on {} images ({} validation), {} parameters",
        target.name(),
        train.len(),
        val.len(),
        net.param_count()
    );
    let log_path = config.log_path(target);
    create_dir(log_path.parent().expect("log path has a parent"))?;
    create_dir(path.parent().expect("checkpoint path has a parent"))?;
    let outcome = train_model(net.as_mut(), &train, &val, &config.train_config(target), Some(&log_path))?;
    outcome.checkpoint.save(&path)?;
    info!(
        "{} best epoch {} digest {}",
        target.name(),
        outcome.checkpoint.meta.epoch,
        outcome.checkpoint.digest()
    );
    Ok(path)
}

/// Per-image scores of the four pipeline variants on one set of records.
pub struct SplitScores {
    pub labels: Vec<u8>,
    pub drn: Vec<f64>,
    pub mixnet: Vec<f64>,
    pub ensemble: Vec<f64>,
    pub fp: Vec<f64>,
    pub cascade: Vec<u8>,
}

pub fn score_records(
    records: &[SliceRecord],
    drn: &dyn Network,
    mixnet: &dyn Network,
    fp_net: &dyn Network,
    threshold: f64,
    batch_size: usize,
) -> Result<SplitScores> {
    let first = |v: Vec<Vec<f64>>| -> Vec<f64> { v.into_iter().map(|p| p[0]).collect() };
    let d = first(predict_records(drn, records, batch_size)?);
    let m = first(predict_records(mixnet, records, batch_size)?);
    let f = first(predict_records(fp_net, records, batch_size)?);
    let ensemble: Vec<f64> = d
        .iter()
        .zip(&m)
        .map(|(&a, &b)| ensemble_mean(&[a, b]))
        .collect::<Result<_>>()?;
    let cascade = ensemble
        .iter()
        .zip(&f)
        .map(|(&e, &p)| cascade_label(e, Some(p), threshold).map(|l| l.as_u8()))
        .collect::<Result<_>>()?;
    Ok(SplitScores {
        labels: records.iter().map(|r| r.label.as_u8()).collect(),
        drn: d,
        mixnet: m,
        ensemble,
        fp: f,
        cascade,
    })
}

pub fn eval_report_path(config: &RunConfig, split: Split) -> PathBuf {
    let name = format!("{split:?}").to_ascii_lowercase();
    config.run_dir().join("reports").join(format!("eval_{name}.json"))
}

pub fn cmd_eval(config: &RunConfig, split: Split) -> Result<PathBuf> {
    let (drn, c_drn) = load_network(config, Target::Drn)?;
    let (mixnet, c_mix) = load_network(config, Target::Mixnet)?;
    let (fp_net, c_fp) = load_network(config, Target::FpNet)?;
    let (segmenter, c_seg) = load_network(config, Target::Segmenter)?;
    let studies = load_split_studies(config, split)?;
    if studies.is_empty() {
        return Err(PecadError::Invalid(format!("split {split:?} has no patients")));
    }
    let threshold = config.metrics.threshold;
    let batch = config.triage.batch_size;

    let records = records_of(&studies, config)?;
    let s = score_records(&records, drn.as_ref(), mixnet.as_ref(), fp_net.as_ref(), threshold, batch)?;
    // a cascaded image is only as confident as its weaker stage
    let fp_scores: Vec<f64> = s.ensemble.iter().zip(&s.fp).map(|(&e, &f)| e.min(f)).collect();
    let per_image = vec![
        ImageRow::score(ROW_DRN, &s.labels, &s.drn, threshold)?,
        ImageRow::score(ROW_MIXNET, &s.labels, &s.mixnet, threshold)?,
        ImageRow::score(ROW_ENSEMBLE, &s.labels, &s.ensemble, threshold)?,
        ImageRow::score_with_labels(ROW_ENSEMBLE_FP, &s.labels, &fp_scores, &s.cascade)?,
    ];

    let mut pairs = Vec::with_capacity(studies.len());
    let mut offset = 0;
    for study in &studies {
        let n = study.volume.n_slices();
        let predicted = s.cascade[offset..offset + n].iter().any(|&v| v == 1);
        pairs.push((study.volume.pe_label, predicted));
        offset += n;
    }
    let per_patient = PatientSection::from(PatientConfusion::from_pairs(pairs));

    let masked: Vec<SliceRecord> = records
        .iter()
        .filter(|r| r.mask.as_ref().is_some_and(|m| m.iter().any(|&v| v != 0)))
        .cloned()
        .collect();
    let mean_iou = if masked.is_empty() {
        None
    } else {
        let maps = predict_records(segmenter.as_ref(), &masked, batch)?;
        let mut sum = 0.0;
        for (map, r) in maps.iter().zip(&masked) {
            let pred = threshold_mask(map, config.metrics.mask_threshold);
            sum += iou(&pred, r.mask.as_deref().expect("filtered on mask"))?;
        }
        Some(sum / masked.len() as f64)
    };

    let model_digests: BTreeMap<String, String> = [
        (Target::Drn, &c_drn),
        (Target::Mixnet, &c_mix),
        (Target::FpNet, &c_fp),
        (Target::Segmenter, &c_seg),
    ]
    .into_iter()
    .map(|(t, c)| (t.name().to_string(), c.digest().to_string()))
    .collect();
    let report = EvaluationReport {
        split: format!("{split:?}").to_ascii_uppercase(),
        config_hash: config.config_hash(),
        threshold,
        per_image,
        per_patient,
        segmentation: SegmentationSection {
            mean_iou,
            n_masked_images: masked.len(),
        },
        model_digests,
    };
    let path = eval_report_path(config, split);
    write_json(&report, &path, "evaluation report")?;
    Ok(path)
}

pub fn triage_dir(config: &RunConfig) -> PathBuf {
    config.run_dir().join("triage")
}

/// Runs the pipeline on one volume; the report lands in the run's triage folder.
pub fn cmd_triage(config: &RunConfig, volume_path: &Path) -> Result<(TriageReport, PathBuf)> {
    let volume = load_volume(volume_path)?;
    let (drn, c_drn) = load_network(config, Target::Drn)?;
    let (mixnet, c_mix) = load_network(config, Target::Mixnet)?;
    let (fp_net, c_fp) = load_network(config, Target::FpNet)?;
    let (segmenter, c_seg) = load_network(config, Target::Segmenter)?;
    let models = TriageModels {
        ensemble: vec![drn.as_ref(), mixnet.as_ref()],
        fp_net: Some(fp_net.as_ref()),
        segmenter: Some(segmenter.as_ref()),
        model_digests: [
            ("drn", &c_drn),
            ("mixnet", &c_mix),
            ("fpnet", &c_fp),
            ("segmenter", &c_seg),
        ]
        .into_iter()
        .map(|(k, c)| (k.to_string(), c.digest().to_string()))
        .collect(),
    };
    let out = triage_dir(config);
    let report = run_triage(
        &volume,
        &models,
        &config.preprocess,
        &config.triage,
        &config.config_hash(),
        &out,
    )?;
    let path = out.join(TriageReport::report_file_name(&volume.patient_id));
    Ok((report, path))
}
